"""Dense statevector simulation for a handful of qubits.

Each device owns a contiguous block of qubits; observables act on that
block only.  Residual checks use a pass tolerance of ``TOL``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BadSpec, DimensionMismatch, TooManyQubits

TOL = 1e-10
MAX_QUBITS = 14

IDENTITY = np.eye(2, dtype=complex)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
# sigma_y |0> = i|1>, sigma_y |1> = -i|0>
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)


def _log2_exact(d: int) -> int:
    m = int(d).bit_length() - 1
    if d < 1 or (1 << m) != d:
        raise DimensionMismatch(f"dimension {d} is not a power of two")
    return m


@dataclass(frozen=True)
class StateVector:
    amplitudes: np.ndarray
    n: int

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex).ravel()
        if self.n > MAX_QUBITS:
            raise TooManyQubits(f"{self.n} qubits exceeds the limit of {MAX_QUBITS}")
        if amps.shape != (2 ** self.n,):
            raise DimensionMismatch(f"expected {2 ** self.n} amplitudes, got {amps.size}")
        if abs(np.vdot(amps, amps).real - 1.0) > TOL:
            raise BadSpec("state is not normalized")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def from_amplitudes(cls, amplitudes) -> StateVector:
        amps = np.asarray(amplitudes, dtype=complex).ravel()
        return cls(amps, _log2_exact(amps.size))


@dataclass(frozen=True)
class LocalObservable:
    """A +-1 valued observable on one device's subsystem."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionMismatch("observable must be square")
        _log2_exact(m.shape[0])
        if not np.allclose(m, m.conj().T, atol=TOL, rtol=0):
            raise BadSpec("observable is not Hermitian")
        if not np.allclose(m @ m, np.eye(m.shape[0]), atol=TOL, rtol=0):
            raise BadSpec("observable does not square to the identity")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def projector(self, sign: int) -> np.ndarray:
        return (np.eye(self.dim) + sign * self.matrix) / 2


@dataclass(frozen=True)
class ObservablePair:
    p_obs: LocalObservable
    q_obs: LocalObservable

    def __post_init__(self):
        if self.p_obs.dim != self.q_obs.dim:
            raise DimensionMismatch("P and Q act on different dimensions")

    @property
    def dim(self) -> int:
        return self.p_obs.dim

    def get(self, setting: str) -> LocalObservable:
        if setting == "P":
            return self.p_obs
        if setting == "Q":
            return self.q_obs
        raise ValueError(f"unknown local setting {setting!r}")


PAULI_PAIR = ObservablePair(LocalObservable(SIGMA_X), LocalObservable(SIGMA_Y))


@dataclass(frozen=True)
class CanonicalInstance:
    """Block dimensions, block weights and local unitaries of a GHZ-passing solution.

    ``block_weights`` may be shorter than the product of ``block_dims``; it
    is zero-padded.  ``local_unitaries`` of None means identities.
    """

    block_dims: tuple[int, ...]
    block_weights: tuple[complex, ...]
    local_unitaries: tuple[np.ndarray, ...] | None = None


def ghz_state(n: int) -> StateVector:
    """(|0...0> - |1...1>)/sqrt(2) on n qubits."""
    if n < 1:
        raise ValueError("need at least one qubit")
    if n > MAX_QUBITS:
        raise TooManyQubits(f"{n} qubits exceeds the limit of {MAX_QUBITS}")
    amps = np.zeros(2 ** n, dtype=complex)
    amps[0] = 1 / np.sqrt(2)
    amps[-1] = -1 / np.sqrt(2)
    return StateVector(amps, n)


def device_dims(state: StateVector, dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims)) != state.amplitudes.size:
        raise DimensionMismatch(
            f"device dimensions {dims} do not partition a {state.n}-qubit state")
    return dims


def apply_local(tensor: np.ndarray, axis: int, op: np.ndarray) -> np.ndarray:
    """Apply ``op`` to one axis of a state tensor."""
    out = np.tensordot(op, tensor, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def apply_product(state: StateVector, ops: Sequence[np.ndarray]) -> np.ndarray:
    """(ops[0] x ops[1] x ...) |state>, returned as a flat vector."""
    dims = device_dims(state, [op.shape[0] for op in ops])
    tensor = state.amplitudes.reshape(dims)
    for axis, op in enumerate(ops):
        tensor = apply_local(tensor, axis, op)
    return tensor.ravel()


def joint_outcome_distribution(
    state: StateVector, observables: Sequence[LocalObservable]
) -> dict[tuple[int, ...], float]:
    """Born-rule distribution over +-1 outcome tuples, one entry per device."""
    dims = device_dims(state, [o.dim for o in observables])
    tensor = state.amplitudes.reshape(dims)
    signs = []
    for axis, obs in enumerate(observables):
        vals, vecs = np.linalg.eigh(obs.matrix)
        tensor = apply_local(tensor, axis, vecs.conj().T)
        signs.append(np.where(vals > 0, 0, 1))
    probs = np.abs(tensor) ** 2
    for axis, sign_index in enumerate(signs):
        probs = np.stack(
            [probs.compress(sign_index == 0, axis=axis).sum(axis=axis),
             probs.compress(sign_index == 1, axis=axis).sum(axis=axis)],
            axis=axis)
    dist = {}
    for idx in itertools.product((0, 1), repeat=len(observables)):
        outcome = tuple(1 - 2 * i for i in idx)
        dist[outcome] = float(probs[idx])
    return dist


def random_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random unitary via QR of a complex Gaussian matrix."""
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def _is_unitary(u: np.ndarray) -> bool:
    return np.allclose(u.conj().T @ u, np.eye(u.shape[0]), atol=TOL, rtol=0)


def canonical_instance(spec: CanonicalInstance) -> tuple[StateVector, list[ObservablePair]]:
    """Build the state and observables of a canonical GHZ-passing solution.

    Device i holds C^{d_i} (x) C^2.  The state is (sum_j a_j |j>) (x) |GHZ>
    with the qubits interleaved into their devices, then rotated by the
    local unitaries; observables are U_i (1 x sigma_x/y) U_i^dagger.
    """
    dims = tuple(int(d) for d in spec.block_dims)
    if len(dims) != 3:
        raise BadSpec("canonical instances have exactly three devices")
    try:
        for d in dims:
            _log2_exact(d)
    except DimensionMismatch as exc:
        raise BadSpec(str(exc)) from None
    total = int(np.prod(dims))
    weights = np.asarray(spec.block_weights, dtype=complex).ravel()
    if weights.size == 0 or weights.size > total:
        raise BadSpec(f"need between 1 and {total} block weights")
    if abs(np.vdot(weights, weights).real - 1.0) > TOL:
        raise BadSpec("block weights are not normalized")
    local_dims = tuple(2 * d for d in dims)
    if spec.local_unitaries is None:
        unitaries = [np.eye(ld, dtype=complex) for ld in local_dims]
    else:
        unitaries = [np.asarray(u, dtype=complex) for u in spec.local_unitaries]
        if len(unitaries) != 3:
            raise BadSpec("need one unitary per device")
        for u, ld in zip(unitaries, local_dims):
            if u.shape != (ld, ld) or not _is_unitary(u):
                raise BadSpec("local unitary has wrong shape or is not unitary")

    block = np.zeros(total, dtype=complex)
    block[:weights.size] = weights
    full = np.kron(block, ghz_state(3).amplitudes)
    tensor = full.reshape(dims + (2, 2, 2)).transpose(0, 3, 1, 4, 2, 5).reshape(local_dims)
    for axis, u in enumerate(unitaries):
        tensor = apply_local(tensor, axis, u)
    state = StateVector.from_amplitudes(tensor.ravel())

    pairs = []
    for d, u in zip(dims, unitaries):
        p = u @ np.kron(np.eye(d), SIGMA_X) @ u.conj().T
        q = u @ np.kron(np.eye(d), SIGMA_Y) @ u.conj().T
        # rounding from the conjugation would trip the strict Hermitian check
        p = (p + p.conj().T) / 2
        q = (q + q.conj().T) / 2
        pairs.append(ObservablePair(LocalObservable(p), LocalObservable(q)))
    return state, pairs


def random_canonical_spec(rng: np.random.Generator, max_block_dim: int = 4) -> CanonicalInstance:
    choices = [d for d in (1, 2, 4, 8) if d <= max_block_dim]
    dims = tuple(int(rng.choice(choices)) for _ in range(3))
    total = int(np.prod(dims))
    n_weights = int(rng.integers(1, total + 1))
    w = rng.standard_normal(n_weights) + 1j * rng.standard_normal(n_weights)
    w /= np.linalg.norm(w)
    unitaries = tuple(random_unitary(2 * d, rng) for d in dims)
    return CanonicalInstance(dims, tuple(w), unitaries)


# Four GHZ relations: PPP -> -1, then QQP, QPQ, PQQ -> +1.
GHZ_RELATIONS = (("PPP", -1), ("QQP", 1), ("QPQ", 1), ("PQQ", 1))


@dataclass(frozen=True)
class RelationReport:
    residuals: tuple[float, ...]
    relations: tuple[tuple[str, int], ...]
    passed: bool


@dataclass(frozen=True)
class StructureReport:
    f_residual: float
    anticommutator_residuals: tuple[float, ...]
    passed: bool


def _ops_for(pairs: Sequence[ObservablePair], setting: str) -> list[np.ndarray]:
    return [pair.get(c).matrix for pair, c in zip(pairs, setting)]


def verify_ghz_relations(
    state: StateVector,
    pairs: Sequence[ObservablePair],
    relations: Sequence[tuple[str, int]] = GHZ_RELATIONS,
) -> RelationReport:
    """Residuals ||(O_1 x ... x O_n - sign)|psi>|| for each demanded relation.

    The default relations are the three-device GHZ ones; pass the settings
    and products of a larger test to check its honest solution.
    """
    for setting, _ in relations:
        if len(setting) != len(pairs):
            raise DimensionMismatch("relation length differs from device count")
    device_dims(state, [p.dim for p in pairs])
    psi = state.amplitudes
    residuals = tuple(
        float(np.linalg.norm(apply_product(state, _ops_for(pairs, setting)) - sign * psi))
        for setting, sign in relations)
    return RelationReport(residuals, tuple(relations), all(r <= TOL for r in residuals))


def verify_structure(state: StateVector, pairs: Sequence[ObservablePair]) -> StructureReport:
    """F-eigencheck and per-device anticommutator residuals for three devices."""
    if len(pairs) != 3:
        raise DimensionMismatch("the structure check needs exactly three devices")
    dims = device_dims(state, [p.dim for p in pairs])
    psi = state.amplitudes
    f_psi = np.zeros_like(psi)
    for setting, sign in GHZ_RELATIONS:
        f_psi += sign * apply_product(state, _ops_for(pairs, setting))
    f_psi /= 4
    f_residual = float(np.linalg.norm(f_psi - psi))

    tensor = psi.reshape(dims)
    anti = []
    for axis, pair in enumerate(pairs):
        p, q = pair.p_obs.matrix, pair.q_obs.matrix
        vec = apply_local(tensor, axis, p @ q + q @ p)
        anti.append(float(np.linalg.norm(vec)))
    passed = f_residual <= TOL and all(a <= TOL for a in anti)
    return StructureReport(f_residual, tuple(anti), passed)
