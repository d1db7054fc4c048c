"""Adversary-supplied device models.

Every device answers through ``respond(local_setting, rng)`` and sees only
its own local input ("P" or "Q") plus its private round counter.
Correlations come from a shared resource fixed when the ensemble is built:
an entangled state that each device measures locally (collapsing it for
the others), or a PR box.  Both are non-signalling by construction.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence, Union

import numpy as np

from .bits import BitString, SeededRng
from .errors import BadSetting, InconsistentSpec
from .nonlocal_tests import NonlocalTest, honest_observables
from .quantum import (
    ObservablePair,
    StateVector,
    apply_local,
    device_dims,
    joint_outcome_distribution,
)

ONLY_ALL_P = "only_all_P"
EXCEPT_ALL_P = "except_all_P"


@dataclass(frozen=True)
class HonestQuantum:
    """Shared state plus local observables; None means the honest Pauli default."""

    state: StateVector | None = None
    pairs: tuple[ObservablePair, ...] | None = None


@dataclass(frozen=True)
class ClassicalTable:
    """Deterministic per-device answers {"P": +-1, "Q": +-1}.

    ``schedule[r]``, when present, overrides ``tables`` for round r.
    """

    tables: tuple[Mapping[str, int], ...]
    schedule: tuple[tuple[Mapping[str, int], ...], ...] = ()

    def tables_for(self, round_index: int) -> tuple[Mapping[str, int], ...]:
        if round_index < len(self.schedule):
            return self.schedule[round_index]
        return self.tables


@dataclass(frozen=True)
class AbortLeak:
    """Fixed outputs on targeted rounds (0-based), honest behaviour elsewhere.

    ``only_all_P`` fixes a tuple with product -1, so a targeted round passes
    only under the all-P setting.  ``except_all_P`` fixes a product +1 tuple,
    which passes every setting but all-P.
    """

    targets: frozenset[int]
    mode: str = ONLY_ALL_P
    fixed_outputs: tuple[int, ...] | None = None
    fallback: HonestQuantum = HonestQuantum()

    def outputs_for(self, n_devices: int) -> tuple[int, ...]:
        if self.fixed_outputs is not None:
            return tuple(self.fixed_outputs)
        if self.mode == ONLY_ALL_P:
            return (1,) * (n_devices - 1) + (-1,)
        return (1,) * n_devices


@dataclass(frozen=True)
class NlBox:
    """Devices 1-2 share a PR box; the rest output fixed values (default +1).

    For more than three devices ``extra_outputs`` must list the fixed output
    of every device from the third on.
    """

    extra_outputs: tuple[int, ...] | None = None


StrategySpec = Union[HonestQuantum, ClassicalTable, AbortLeak, NlBox]


class Device(Protocol):
    def respond(self, local_setting: str, rng: SeededRng) -> int: ...


class SharedState:
    """Entangled resource: one fresh copy of the state per round.

    A device measuring its subsystem collapses that round's copy, so later
    devices in the same round see the post-measurement state.
    """

    def __init__(self, state: StateVector, pairs: Sequence[ObservablePair]):
        self.dims = device_dims(state, [p.dim for p in pairs])
        self.pairs = tuple(pairs)
        self._initial = state.amplitudes.reshape(self.dims)
        self._live: dict[int, np.ndarray] = {}
        self._measured: dict[int, int] = {}

    def measure(self, device: int, round_index: int, setting: str, rng: SeededRng) -> int:
        tensor = self._live.get(round_index, self._initial)
        obs = self.pairs[device].get(setting)
        plus = apply_local(tensor, device, obs.projector(1))
        p_plus = float(np.vdot(plus, plus).real)
        if rng.random() < p_plus:
            outcome, post, prob = 1, plus, p_plus
        else:
            outcome = -1
            post = apply_local(tensor, device, obs.projector(-1))
            prob = 1.0 - p_plus
        count = self._measured.get(round_index, 0) + 1
        if count == len(self.pairs):
            self._live.pop(round_index, None)
            self._measured.pop(round_index, None)
        else:
            self._live[round_index] = post / np.sqrt(prob)
            self._measured[round_index] = count
        return outcome


class PrBox:
    """PR box: outputs multiply to -1 iff both inputs are P, uniform marginals."""

    def __init__(self):
        self._first: dict[int, tuple[str, int]] = {}

    def respond(self, round_index: int, setting: str, rng: SeededRng) -> int:
        if round_index not in self._first:
            a = rng.uniform_sign()
            self._first[round_index] = (setting, a)
            return a
        other_setting, a = self._first.pop(round_index)
        sign = -1 if setting == "P" and other_setting == "P" else 1
        return sign * a


class _Counted:
    def __init__(self):
        self.round = 0

    def respond(self, local_setting: str, rng: SeededRng) -> int:
        if local_setting not in ("P", "Q"):
            raise BadSetting(f"local setting must be 'P' or 'Q', got {local_setting!r}")
        out = self._answer(self.round, local_setting, rng)
        self.round += 1
        return out

    def _answer(self, round_index: int, local_setting: str, rng: SeededRng) -> int:
        raise NotImplementedError


class QuantumDevice(_Counted):
    def __init__(self, index: int, source: SharedState):
        super().__init__()
        self.index = index
        self.source = source

    def _answer(self, round_index, local_setting, rng):
        return self.source.measure(self.index, round_index, local_setting, rng)


class TableDevice(_Counted):
    def __init__(self, index: int, spec: ClassicalTable):
        super().__init__()
        self.index = index
        self.spec = spec

    def _answer(self, round_index, local_setting, rng):
        return int(self.spec.tables_for(round_index)[self.index][local_setting])


class AbortLeakDevice(_Counted):
    def __init__(self, targets: frozenset[int], fixed: int, honest: QuantumDevice):
        super().__init__()
        self.targets = targets
        self.fixed = fixed
        self.honest = honest

    def _answer(self, round_index, local_setting, rng):
        if round_index in self.targets:
            return self.fixed
        return self.honest._answer(round_index, local_setting, rng)


class BoxDevice(_Counted):
    def __init__(self, box: PrBox):
        super().__init__()
        self.box = box

    def _answer(self, round_index, local_setting, rng):
        return self.box.respond(round_index, local_setting, rng)


class ConstantDevice(_Counted):
    def __init__(self, value: int):
        super().__init__()
        self.value = value

    def _answer(self, round_index, local_setting, rng):
        return self.value


@dataclass
class DeviceEnsemble:
    test: NonlocalTest
    spec: StrategySpec
    devices: list
    rounds: int = 0

    @property
    def n_devices(self) -> int:
        return len(self.devices)

    @property
    def used(self) -> bool:
        return self.rounds > 0


def _honest_resource(spec: HonestQuantum, test: NonlocalTest) -> SharedState:
    if spec.state is None and spec.pairs is None:
        pairs, state = honest_observables(test)
    elif spec.state is None or spec.pairs is None:
        raise InconsistentSpec("give both a state and observables, or neither")
    else:
        state, pairs = spec.state, spec.pairs
    if len(pairs) != test.n_devices:
        raise InconsistentSpec(f"{len(pairs)} observable pairs for {test.n_devices} devices")
    try:
        return SharedState(state, pairs)
    except ValueError as exc:
        raise InconsistentSpec(str(exc)) from None


def _check_sign(value, what: str) -> int:
    if value not in (1, -1):
        raise InconsistentSpec(f"{what} must be +1 or -1, got {value!r}")
    return int(value)


def _check_tables(tables, n: int) -> None:
    if len(tables) != n:
        raise InconsistentSpec(f"{len(tables)} tables for {n} devices")
    for i, t in enumerate(tables):
        for c in ("P", "Q"):
            if c not in t:
                raise InconsistentSpec(f"table {i} lacks an entry for {c}")
            _check_sign(t[c], f"table {i}[{c}]")


def _nlbox_extras(spec: NlBox, n: int) -> tuple[int, ...]:
    if spec.extra_outputs is None:
        if n != 3:
            raise InconsistentSpec("NL-box strategy beyond three devices needs explicit outputs")
        return (1,)
    if len(spec.extra_outputs) != n - 2:
        raise InconsistentSpec(f"need fixed outputs for {n - 2} devices beyond the box")
    return tuple(_check_sign(v, "fixed output") for v in spec.extra_outputs)


def build_ensemble(spec: StrategySpec, test: NonlocalTest, rng: SeededRng | None = None) -> DeviceEnsemble:
    """Wire up isolated devices for ``spec``; ``rng`` is accepted for symmetry and unused."""
    n = test.n_devices
    if isinstance(spec, HonestQuantum):
        source = _honest_resource(spec, test)
        devices = [QuantumDevice(i, source) for i in range(n)]
    elif isinstance(spec, ClassicalTable):
        _check_tables(spec.tables, n)
        for tables in spec.schedule:
            _check_tables(tables, n)
        devices = [TableDevice(i, spec) for i in range(n)]
    elif isinstance(spec, AbortLeak):
        if spec.mode not in (ONLY_ALL_P, EXCEPT_ALL_P):
            raise InconsistentSpec(f"unknown abort-leak mode {spec.mode!r}")
        fixed = spec.outputs_for(n)
        if len(fixed) != n:
            raise InconsistentSpec(f"{len(fixed)} fixed outputs for {n} devices")
        for v in fixed:
            _check_sign(v, "fixed output")
        want = -1 if spec.mode == ONLY_ALL_P else 1
        if int(np.prod(fixed)) != want:
            raise InconsistentSpec(f"{spec.mode} needs fixed outputs with product {want:+d}")
        if any(t < 0 for t in spec.targets):
            raise InconsistentSpec("round indices are nonnegative")
        source = _honest_resource(spec.fallback, test)
        devices = [AbortLeakDevice(frozenset(spec.targets), fixed[i], QuantumDevice(i, source))
                   for i in range(n)]
    elif isinstance(spec, NlBox):
        extras = _nlbox_extras(spec, n)
        box = PrBox()
        devices = [BoxDevice(box), BoxDevice(box)] + [ConstantDevice(v) for v in extras]
    else:
        raise InconsistentSpec(f"unknown strategy {spec!r}")
    return DeviceEnsemble(test, spec, devices)


def round_outputs(ensemble: DeviceEnsemble, setting: str, rng: SeededRng) -> tuple[int, ...]:
    """Query each device with its own local setting only."""
    if len(setting) != ensemble.n_devices or set(setting) - {"P", "Q"}:
        raise BadSetting(f"setting {setting!r} does not fit {ensemble.n_devices} devices")
    outcomes = tuple(int(dev.respond(local, rng)) for dev, local in zip(ensemble.devices, setting))
    ensemble.rounds += 1
    return outcomes


def exact_outcome_distribution(
    spec: StrategySpec, test: NonlocalTest, setting: str, round_index: int = 0
) -> dict[tuple[int, ...], float]:
    """Exact joint output distribution of ``spec`` under ``setting`` (zero-mass tuples omitted)."""
    n = test.n_devices
    if len(setting) != n or set(setting) - {"P", "Q"}:
        raise BadSetting(f"setting {setting!r} does not fit {n} devices")
    if isinstance(spec, HonestQuantum):
        source = _honest_resource(spec, test)
        obs = [pair.get(c) for pair, c in zip(source.pairs, setting)]
        state = StateVector.from_amplitudes(source._initial.ravel())
        dist = joint_outcome_distribution(state, obs)
        return {o: p for o, p in dist.items() if p > 0}
    if isinstance(spec, ClassicalTable):
        tables = spec.tables_for(round_index)
        return {tuple(int(tables[i][c]) for i, c in enumerate(setting)): 1.0}
    if isinstance(spec, AbortLeak):
        if round_index in spec.targets:
            return {spec.outputs_for(n): 1.0}
        return exact_outcome_distribution(spec.fallback, test, setting, round_index)
    if isinstance(spec, NlBox):
        extras = _nlbox_extras(spec, n)
        sign = -1 if setting[0] == "P" and setting[1] == "P" else 1
        return {(a, sign * a) + extras: 0.5 for a in (1, -1)}
    raise InconsistentSpec(f"unknown strategy {spec!r}")


def all_settings(n_devices: int) -> list[str]:
    return ["".join(s) for s in itertools.product("PQ", repeat=n_devices)]


@dataclass(frozen=True)
class RoundKnowledge:
    """What Eve can say about one round.

    ``outputs`` holds outcomes known whatever the local input;
    ``conditional_outputs`` maps (device, local input) to a known outcome;
    ``setting_bits`` is the set of setting-bit strings still possible.
    """

    outputs: Mapping[int, int] = field(default_factory=dict)
    conditional_outputs: Mapping[tuple[int, str], int] = field(default_factory=dict)
    setting_bits: frozenset[str] | None = None

    @property
    def empty(self) -> bool:
        return not self.outputs and not self.conditional_outputs and self.setting_bits is None


@dataclass(frozen=True)
class EveView:
    strategy: str
    rounds: tuple[RoundKnowledge, ...]

    @property
    def knows_anything(self) -> bool:
        return any(not r.empty for r in self.rounds)

    def predicted_output(self, round_index: int, device: int, local_setting: str) -> int | None:
        known = self.rounds[round_index]
        if device in known.outputs:
            return known.outputs[device]
        return known.conditional_outputs.get((device, local_setting))


def _setting_label(test: NonlocalTest, index: int) -> str:
    return str(BitString.from_int(index, test.bits_per_setting))


def eve_predictions(spec: StrategySpec, test: NonlocalTest, aborted: bool, rounds: int) -> EveView:
    """Eve's knowledge from her strategy plus the public abort flag and round count.

    Abort-mode semantics: every round before the last passed, and the last
    failed iff ``aborted``.
    """
    n = test.n_devices
    if isinstance(spec, HonestQuantum):
        return EveView("honest", tuple(RoundKnowledge() for _ in range(rounds)))
    if isinstance(spec, ClassicalTable):
        view = []
        for r in range(rounds):
            tables = spec.tables_for(r)
            cond = {(i, c): int(tables[i][c]) for i in range(n) for c in ("P", "Q")}
            fixed = {i: int(tables[i]["P"]) for i in range(n) if tables[i]["P"] == tables[i]["Q"]}
            view.append(RoundKnowledge(outputs=fixed, conditional_outputs=cond))
        return EveView("classical", tuple(view))
    if isinstance(spec, NlBox):
        known = dict(enumerate(_nlbox_extras(spec, n), start=2))
        return EveView("nlbox", tuple(RoundKnowledge(outputs=known) for _ in range(rounds)))
    if isinstance(spec, AbortLeak):
        fixed = spec.outputs_for(n)
        passing = {_setting_label(test, i) for i, s in enumerate(test.settings)
                   if test.required_products[i] == int(np.prod(fixed))}
        failing = {_setting_label(test, i) for i in range(len(test.settings))} - passing
        view = []
        for r in range(rounds):
            if r not in spec.targets:
                view.append(RoundKnowledge())
                continue
            failed_here = aborted and r == rounds - 1
            view.append(RoundKnowledge(outputs=dict(enumerate(fixed)),
                                       setting_bits=frozenset(failing if failed_here else passing)))
        return EveView("abort-leak", tuple(view))
    raise InconsistentSpec(f"unknown strategy {spec!r}")
