"""Expansion protocol engine, iterated expansion and randomness accounting.

The output length gamma is a policy, not a proven bound: the heuristic
assumes the hashed string carries nearly full min-entropy and subtracts a
margin ell chosen so that the leftover-hash bound meets delta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import amplify
from .bits import BitString, RandomnessLedger, SeededRng, chunk_to_indices, concat, partition_input
from .devices import AbortLeak, DeviceEnsemble, StrategySpec, exact_outcome_distribution, round_outputs
from .errors import BadParameters, EnsembleReused, LengthMismatch, SeedTooShort
from .nonlocal_tests import NonlocalTest, encode_setting, make_test, validate_and_decode

ABORT = "abort"
TALLY = "tally"
HEURISTIC = "heuristic"
ZERO = "zero"


@dataclass(frozen=True)
class ProtocolConfig:
    """Run parameters.

    ``gamma_policy`` is "heuristic", "zero", or an explicit int.  ``trusted``
    skips privacy amplification and outputs x || x_tilde.
    """

    zeta: float = 1e-3
    delta: float = 1e-2
    epsilon: float = 0.0
    k: int = 1
    mode: str = ABORT
    include_x1_in_hash: bool = True
    gamma_policy: str | int = HEURISTIC
    trusted: bool = False

    def __post_init__(self):
        for name in ("zeta", "delta"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise BadParameters(f"{name} must lie in [0, 1], got {value}")
        if self.epsilon < 0:
            raise BadParameters("epsilon must be nonnegative")
        if self.mode not in (ABORT, TALLY):
            raise BadParameters(f"mode must be {ABORT!r} or {TALLY!r}")
        policy = self.gamma_policy
        if isinstance(policy, bool) or not (policy in (HEURISTIC, ZERO) or isinstance(policy, int)):
            raise BadParameters(f"unknown gamma policy {policy!r}")
        if isinstance(policy, int) and policy < 0:
            raise BadParameters("explicit gamma must be nonnegative")
        if policy == HEURISTIC and not self.trusted and self.delta <= self.epsilon:
            raise BadParameters("the heuristic gamma needs delta > epsilon")

    @property
    def gamma_label(self) -> str:
        if isinstance(self.gamma_policy, int):
            return "explicit"
        return str(self.gamma_policy)


def heuristic_margin(delta: float, epsilon: float = 0.0) -> int:
    """Smallest integer ell with epsilon + 1/2 * 2^(-ell/2) <= delta."""
    if delta <= epsilon:
        raise BadParameters("delta must exceed epsilon")
    raw = 2 * math.log2(1 / (2 * (delta - epsilon)))
    return max(0, math.ceil(raw - 1e-12))


def _test_shape(k: int) -> tuple[int, int]:
    test = make_test(k)
    return test.bits_per_setting, test.bits_per_outcome


def gamma(
    n1_bits: int,
    zeta: float,
    delta: float,
    epsilon: float,
    T: int | None = None,
    *,
    k: int = 1,
    policy: str | int = HEURISTIC,
    include_x1: bool = True,
) -> int:
    """Output length of privacy amplification under ``policy``.

    Heuristic: the hashed string's full length (|x1| + rounds * outcome bits,
    or only the outcome bits when x1 is excluded), scaled by the passed
    fraction T / rounds, minus ``heuristic_margin(delta, epsilon)``, clamped
    at zero.  ``zeta`` does not enter.
    """
    if isinstance(policy, int) and not isinstance(policy, bool):
        return policy
    if policy == ZERO:
        return 0
    if policy != HEURISTIC:
        raise BadParameters(f"unknown gamma policy {policy!r}")
    if delta <= epsilon:
        raise BadParameters("delta must exceed epsilon")
    b_set, b_out = _test_shape(k)
    rounds = n1_bits // b_set
    passed = rounds if T is None else T
    if not 0 <= passed <= rounds:
        raise BadParameters(f"{passed} passed rounds out of {rounds}")
    budget = (n1_bits if include_x1 else 0) + rounds * b_out
    if rounds:
        budget = budget * passed // rounds
    return max(0, budget - heuristic_margin(delta, epsilon))


def block_size(config: ProtocolConfig) -> int:
    """Input lengths must be a multiple of this."""
    b_set, b_out = _test_shape(config.k)
    if config.trusted:
        return b_set
    return 2 * b_set + b_out


def split_input(x: BitString, config: ProtocolConfig) -> tuple[BitString, BitString]:
    """(x1, r) with |r| = |x1| + rounds * outcome bits, so r can seed a hash of x'."""
    unit = block_size(config)
    if len(x) == 0 or len(x) % unit:
        raise LengthMismatch(f"input length {len(x)} is not a positive multiple of {unit}")
    if config.trusted:
        return x, BitString()
    if config.k == 1:
        return partition_input(x)
    b_set, _ = _test_shape(config.k)
    m = len(x) // unit * b_set
    return x[:m], x[m:]


@dataclass(frozen=True)
class RoundRecord:
    setting_bits: BitString
    setting: str
    outcomes: tuple[int, ...]
    passed: bool
    decoded: BitString | None


@dataclass
class Transcript:
    rounds: list[RoundRecord] = field(default_factory=list)
    aborted: bool = False
    x_tilde: BitString = BitString()
    x_prime: BitString = BitString()
    gamma: int = 0
    gamma_label: str = HEURISTIC

    @property
    def T(self) -> int:
        return sum(r.passed for r in self.rounds)


@dataclass(frozen=True)
class ProtocolOutput:
    """Abort, or the hashed string s and seed r.

    ``passthrough`` holds bits emitted without hashing: all of x in trusted
    mode (where s is the raw x_tilde), or x1 in the exclude-x1 ablation.
    """

    aborted: bool
    s: BitString = BitString()
    r: BitString = BitString()
    passthrough: BitString = BitString()

    @property
    def bits(self) -> BitString:
        if self.aborted:
            return BitString()
        return self.passthrough + self.s + self.r


ABORTED = ProtocolOutput(aborted=True)


def run_protocol1(
    x: BitString, ensemble: DeviceEnsemble, config: ProtocolConfig, rng: SeededRng
) -> tuple[ProtocolOutput, Transcript, RandomnessLedger]:
    """Run one expansion with a fresh ensemble.

    ``rng`` drives only the devices' internal randomness; all of Bob's
    private bits come from ``x``.
    """
    test = ensemble.test
    if test.k != config.k:
        raise BadParameters(f"ensemble runs k={test.k}, config asks for k={config.k}")
    if ensemble.used:
        raise EnsembleReused("this ensemble already took part in a run")
    x1, r = split_input(x, config)
    ledger = RandomnessLedger()
    ledger.consume(len(x))
    transcript = Transcript(gamma_label=config.gamma_label)

    for idx in chunk_to_indices(x1, test.bits_per_setting):
        setting_bits = BitString.from_int(idx, test.bits_per_setting)
        setting = encode_setting(test, setting_bits)
        outcomes = round_outputs(ensemble, setting, rng)
        passed, decoded = validate_and_decode(test, setting, outcomes)
        transcript.rounds.append(RoundRecord(setting_bits, setting, outcomes, passed, decoded))
        if not passed and config.mode == ABORT:
            transcript.aborted = True
            return ABORTED, transcript, ledger

    x_tilde = concat(rec.decoded for rec in transcript.rounds if rec.passed)
    transcript.x_tilde = x_tilde
    ledger.emit_raw(len(x_tilde))

    if config.trusted:
        out = ProtocolOutput(False, s=x_tilde, passthrough=x1)
        transcript.x_prime = x1 + x_tilde
        ledger.output(len(out.bits))
        return out, transcript, ledger

    x_prime = x1 + x_tilde if config.include_x1_in_hash else x_tilde
    transcript.x_prime = x_prime
    g = gamma(len(x1), config.zeta, config.delta, config.epsilon, transcript.T,
              k=config.k, policy=config.gamma_policy, include_x1=config.include_x1_in_hash)
    if g > len(x_prime):
        raise BadParameters(f"gamma={g} exceeds the {len(x_prime)}-bit string being hashed")
    transcript.gamma = g
    need = amplify.seed_length(len(x_prime), g, amplify.COMPACT)
    if len(r) < need:
        raise SeedTooShort(f"hash needs {need} seed bits, only {len(r)} available")
    s = amplify.compact_toeplitz_hash(x_prime, r, g)
    passthrough = BitString() if config.include_x1_in_hash else x1
    out = ProtocolOutput(False, s=s, r=r, passthrough=passthrough)
    ledger.output(len(out.bits))
    return out, transcript, ledger


@dataclass(frozen=True)
class StageReport:
    stage: int
    input_bits: int
    discarded_bits: int
    aborted: bool
    output_bits: int
    gamma: int
    passes: int


@dataclass
class IteratedResult:
    output: BitString | None
    stages: list[StageReport]
    ledger: RandomnessLedger

    @property
    def aborted(self) -> bool:
        return self.output is None


def run_iterated(
    x: BitString, ensembles: Sequence[DeviceEnsemble], config: ProtocolConfig, rng: SeededRng
) -> IteratedResult:
    """Chain the expansion protocol over separate ensembles, feeding each stage's (S, R) to the next.

    Each stage input is truncated to the largest valid length; the discarded
    bits are counted in the ledger.
    """
    if not ensembles:
        raise BadParameters("need at least one ensemble")
    if len({id(e) for e in ensembles}) != len(ensembles):
        raise EnsembleReused("an ensemble appears at more than one stage")
    for e in ensembles:
        if e.used:
            raise EnsembleReused("a stage ensemble has already been used")
    unit = block_size(config)
    ledger = RandomnessLedger()
    ledger.consume(len(x))
    stages = []
    current = x
    for i, ensemble in enumerate(ensembles):
        keep = len(current) // unit * unit
        if keep == 0:
            raise LengthMismatch(f"stage {i} input of {len(current)} bits is too short")
        dropped = len(current) - keep
        ledger.discard(dropped)
        out, transcript, stage_ledger = run_protocol1(current[:keep], ensemble, config, rng)
        ledger.emit_raw(stage_ledger.bits_emitted_raw)
        stages.append(StageReport(i, keep, dropped, out.aborted, len(out.bits),
                                  transcript.gamma, transcript.T))
        if out.aborted:
            return IteratedResult(None, stages, ledger)
        current = out.bits
    ledger.output(len(current))
    return IteratedResult(current, stages, ledger)


@dataclass(frozen=True)
class ExpansionReport:
    consumed: int
    final: int
    achieved_ratio: float
    predicted_ratio: float
    asymptotic_ratio: float
    margin_bits: int | None
    gamma_policy: str
    trusted: bool
    notes: tuple[str, ...]


def predicted_ratio(k: int, trusted: bool) -> float:
    """Long-input expansion factor: (b_set + b_out) / b_set trusted, else 1 + (2k-1)/(log2 4k + 2k - 1)."""
    b_set, b_out = _test_shape(k)
    if trusted:
        return (b_set + b_out) / b_set
    return 1 + (2 * k - 1) / (math.log2(4 * k) + 2 * k - 1)


def expansion_report(
    ledger: RandomnessLedger, config: ProtocolConfig, trusted: bool | None = None
) -> ExpansionReport:
    trusted = config.trusted if trusted is None else trusted
    consumed = ledger.bits_consumed
    final = ledger.bits_output_final
    achieved = final / consumed if consumed else 0.0
    asymptotic = predicted_ratio(config.k, trusted)
    notes = []
    margin = None
    predicted = asymptotic
    if not trusted:
        if config.gamma_policy == HEURISTIC:
            margin = heuristic_margin(config.delta, config.epsilon)
            predicted = asymptotic - (margin / consumed if consumed else 0.0)
            notes.append("gamma is heuristic: no proven bound backs this output length")
            notes.append("zeta does not enter the heuristic gamma")
        else:
            notes.append(f"gamma policy is {config.gamma_label}")
        if config.mode == TALLY:
            notes.append("tally mode scales gamma by the passed fraction (experimental)")
    return ExpansionReport(consumed, final, achieved, predicted, asymptotic, margin,
                           "none" if trusted else config.gamma_label, trusted, tuple(notes))


def exact_run_distribution(
    spec: StrategySpec, test: NonlocalTest, x1_bits: int, include_x1: bool = True
) -> tuple[dict[BitString, float], float]:
    """Exact abort-mode distribution of the string to be hashed.

    Enumerates every uniformly random x1 of ``x1_bits`` bits and every device
    outcome with its exact probability.  Returns ({x': P(x', no abort)},
    P(abort)).
    """
    b_set = test.bits_per_setting
    rounds = x1_bits // b_set
    if rounds * b_set != x1_bits:
        raise LengthMismatch(f"{x1_bits} bits do not split into {b_set}-bit settings")
    per_round = [
        [exact_outcome_distribution(spec, test, s, r) for s in test.settings]
        for r in range(rounds)
    ]
    weight = 2.0 ** -x1_bits
    table: dict[BitString, float] = {}
    p_abort = 0.0
    for x1_value in range(1 << x1_bits):
        x1 = BitString.from_int(x1_value, x1_bits)
        branches = [(BitString(), weight)]
        for r, idx in enumerate(chunk_to_indices(x1, b_set)):
            setting = test.settings[idx]
            grown = []
            for prefix, p in branches:
                for outcomes, q in per_round[r][idx].items():
                    passed, decoded = validate_and_decode(test, setting, outcomes)
                    if passed:
                        grown.append((prefix + decoded, p * q))
                    else:
                        p_abort += p * q
            branches = grown
        for x_tilde, p in branches:
            key = x1 + x_tilde if include_x1 else x_tilde
            table[key] = table.get(key, 0.0) + p
    return table, p_abort


def setting_posterior_given_pass(
    spec: StrategySpec, test: NonlocalTest, round_index: int
) -> dict[BitString, float]:
    """P(setting bits of one round | that round passed), uniform prior on settings."""
    joint = {}
    for idx, setting in enumerate(test.settings):
        dist = exact_outcome_distribution(spec, test, setting, round_index)
        p_pass = sum(p for o, p in dist.items() if validate_and_decode(test, setting, o)[0])
        joint[BitString.from_int(idx, test.bits_per_setting)] = p_pass / len(test.settings)
    total = sum(joint.values())
    if total == 0:
        raise BadParameters("this round can never pass")
    return {bits: p / total for bits, p in joint.items()}


def distance_from_uniform(dist: dict) -> float:
    values = np.array(list(dist.values()), dtype=float)
    return float(0.5 * np.abs(values - 1 / values.size).sum())


def conditional_joint(table: dict[BitString, float], n_bits: int) -> amplify.JointDistribution:
    """Normalize a {x': P(x', no abort)} table into P(x' | no abort) with trivial e."""
    total = sum(table.values())
    probs = np.zeros(1 << n_bits)
    for key, p in table.items():
        probs[key.to_int()] += p / total
    return amplify.JointDistribution(probs / probs.sum(), n_bits)


@dataclass(frozen=True)
class LeakAssessment:
    """Exact effect of an abort-leak attack on a toy instance."""

    p_no_abort: float
    setting_posteriors: dict[int, dict[str, float]]
    posterior_distances: dict[int, float]
    hashed_bits: int
    hmin: float
    leaked_bits: float
    hash_reports: tuple[amplify.LeftoverHashReport, ...]


def abort_leak_assessment(
    spec: AbortLeak,
    test: NonlocalTest,
    x1_bits: int,
    t_values: Sequence[int] = (),
    family: str = amplify.COMPACT,
) -> LeakAssessment:
    """Enumerate every x1 and device outcome of an abort-leak run.

    Reports, per targeted round, the posterior of its setting bits given
    that it passed (what the ablation exposes when x1 is output unhashed),
    and for the full protocol the exact distance of the hashed x' (seed
    revealed) next to the leftover-hash bound at the conditional
    min-entropy.
    """
    rounds = x1_bits // test.bits_per_setting
    posteriors, distances = {}, {}
    for r in sorted(spec.targets):
        if r >= rounds:
            continue
        post = setting_posterior_given_pass(spec, test, r)
        posteriors[r] = {str(bits): p for bits, p in post.items()}
        distances[r] = distance_from_uniform(post)
    table, p_abort = exact_run_distribution(spec, test, x1_bits)
    n_bits = x1_bits + rounds * test.bits_per_outcome
    joint = conditional_joint(table, n_bits)
    hmin = amplify.min_entropy(joint)
    reports = tuple(amplify.verify_leftover_hash(joint, t, 0.0, family) for t in t_values)
    return LeakAssessment(1 - p_abort, posteriors, distances, n_bits, hmin, n_bits - hmin, reports)
