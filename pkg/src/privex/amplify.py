"""Two-universal hashing and exact classical privacy analytics.

Two Toeplitz-based families are provided, both linear over GF(2):

* ``toeplitz``: the full t x n Toeplitz matrix, seed length n + t - 1,
  entry M[i][j] = seed[i - j + n - 1].  Seed bits 0..n-1 are the first
  row read right to left; bits n-1..n+t-2 are the first column top down.
* ``compact``: M = [I_t | T] with T a t x (n - t) Toeplitz block, seed
  length n - 1 (none when t is 0 or n).  This fits inside a seed no longer
  than the input, which is what the protocol partitions for.

Side information is classical, so all quantities are computed exactly on
finite joint tables P(x, e).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Hashable, Mapping

import numpy as np
from scipy import signal

from .bits import BitString
from .errors import (
    BadEpsilon,
    InvalidDistribution,
    LengthMismatch,
    SeedTooShort,
    TooLarge,
)

TOEPLITZ = "toeplitz"
COMPACT = "compact"
FAMILIES = (TOEPLITZ, COMPACT)
MAX_SEED_BITS = 20
# cap on seeds x inputs x e-symbols touched by exhaustive leftover-hash checks
MAX_ENUMERATION = 1 << 27


@dataclass(frozen=True)
class ToeplitzSeed:
    bits: BitString
    n: int
    t: int

    def __post_init__(self):
        if not 0 <= self.t <= self.n:
            raise LengthMismatch(f"output length {self.t} exceeds input length {self.n}")
        if len(self.bits) != self.n + self.t - 1 and self.t > 0:
            raise LengthMismatch(f"seed needs {self.n + self.t - 1} bits, got {len(self.bits)}")


def seed_length(n: int, t: int, family: str = TOEPLITZ) -> int:
    if family == TOEPLITZ:
        return n + t - 1 if t > 0 else 0
    if family == COMPACT:
        return 0 if t in (0, n) else n - 1
    raise ValueError(f"unknown hash family {family!r}")


def _toeplitz_index(rows: int, cols: int) -> np.ndarray:
    i = np.arange(rows)[:, None]
    j = np.arange(cols)[None, :]
    return i - j + cols - 1


def _matrices(seeds: np.ndarray, n: int, t: int, family: str) -> np.ndarray:
    """Hash matrices for a batch of seeds, shape (batch, t, n)."""
    batch = seeds.shape[0]
    if t == 0:
        return np.zeros((batch, 0, n), dtype=np.uint8)
    if family == TOEPLITZ:
        return seeds[:, _toeplitz_index(t, n)]
    eye = np.broadcast_to(np.eye(t, dtype=np.uint8), (batch, t, t))
    if t == n:
        return eye.copy()
    block = seeds[:, _toeplitz_index(t, n - t)]
    return np.concatenate([eye, block], axis=2)


def toeplitz_matrix(seed: ToeplitzSeed) -> np.ndarray:
    return _matrices(seed.bits.to_array()[None, :], seed.n, seed.t, TOEPLITZ)[0]


def _toeplitz_product(seed: np.ndarray, x: np.ndarray, rows: int) -> np.ndarray:
    """GF(2) product of the rows x len(x) Toeplitz matrix of ``seed`` with ``x``.

    Row i is a window of the full convolution seed * x, so large inputs go
    through an FFT instead of a dense matrix.
    """
    cols = x.size
    if rows == 0 or cols == 0:
        return np.zeros(rows, dtype=np.uint8)
    a, b = seed[:rows + cols - 1].astype(np.int64), x.astype(np.int64)
    if rows * cols <= 1 << 20:
        conv = np.convolve(a, b)
    else:
        conv = np.rint(signal.fftconvolve(a.astype(float), b.astype(float))).astype(np.int64)
    return (conv[cols - 1:cols - 1 + rows] % 2).astype(np.uint8)


def toeplitz_hash(x: BitString, seed: ToeplitzSeed) -> BitString:
    """s = M x over GF(2) with M the Toeplitz matrix of ``seed``."""
    if len(x) != seed.n:
        raise LengthMismatch(f"input has {len(x)} bits, seed expects {seed.n}")
    return BitString.from_array(_toeplitz_product(seed.bits.to_array(), x.to_array(), seed.t))


def compact_matrix(seed: BitString, n: int, t: int) -> np.ndarray:
    if not 0 <= t <= n:
        raise LengthMismatch(f"output length {t} exceeds input length {n}")
    need = seed_length(n, t, COMPACT)
    if len(seed) < need:
        raise SeedTooShort(f"compact hash {n}->{t} needs {need} seed bits, got {len(seed)}")
    return _matrices(seed[:need].to_array()[None, :], n, t, COMPACT)[0]


def compact_toeplitz_hash(x: BitString, seed: BitString, t: int) -> BitString:
    """Hash with [I | T]; only the first ``seed_length(n, t, "compact")`` seed bits are read."""
    n = len(x)
    if not 0 <= t <= n:
        raise LengthMismatch(f"output length {t} exceeds input length {n}")
    need = seed_length(n, t, COMPACT)
    if len(seed) < need:
        raise SeedTooShort(f"compact hash {n}->{t} needs {need} seed bits, got {len(seed)}")
    bits = x.to_array()
    head = bits[:t]
    if t == n or t == 0:
        return BitString.from_array(head)
    tail = _toeplitz_product(seed[:need].to_array(), bits[t:], t)
    return BitString.from_array(head ^ tail)


def _all_bitrows(width: int) -> np.ndarray:
    values = np.arange(1 << width, dtype=np.int64)
    shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
    return ((values[:, None] >> shifts) & 1).astype(np.uint8)


def _gf2_solution_count(rows: list[int], rhs: list[int], width: int) -> int:
    """Number of s in GF(2)^width with <row_i, s> = rhs_i for all i."""
    pivots: list[tuple[int, int]] = []
    for row, b in zip(rows, rhs):
        for prow, pb in pivots:
            if row & (prow & -prow):
                row ^= prow
                b ^= pb
        if row:
            pivots.append((row, b))
        elif b:
            return 0
    return 1 << (width - len(pivots))


def family_collision_check(n: int, t: int, family: str = TOEPLITZ) -> Fraction:
    """Max over distinct inputs of the fraction of seeds on which they collide.

    Hashes are linear in the input, so x1 and x2 collide iff M d = 0 with
    d = x1 ^ x2; M d is affine in the seed, so the count of colliding seeds
    is the size of a GF(2) solution set.
    """
    if not 0 <= t <= n:
        raise LengthMismatch(f"output length {t} exceeds input length {n}")
    width = seed_length(n, t, family)
    if width > MAX_SEED_BITS:
        raise TooLarge(f"{width} seed bits is beyond enumeration")
    if t == 0:
        return Fraction(1)
    worst = 0
    for d in range(1, 1 << n):
        dbits = [(d >> (n - 1 - j)) & 1 for j in range(n)]
        if family == TOEPLITZ:
            cols, offset, rhs = n, 0, [0] * t
        else:
            cols, offset, rhs = n - t, t, dbits[:t]
        rows = []
        for i in range(t):
            row = 0
            for j in range(cols):
                if dbits[offset + j]:
                    k = i - j + cols - 1
                    row |= 1 << (width - 1 - k)
            rows.append(row)
        worst = max(worst, _gf2_solution_count(rows, rhs, width))
        if worst == 1 << width:
            break
    return Fraction(worst, 1 << width)


@dataclass(frozen=True)
class JointDistribution:
    """P(x, e) as a matrix: rows are values x (integers, big-endian bits), columns e.

    ``n_bits`` is the bit length of x, when x ranges over all 2^n_bits strings.
    """

    probs: np.ndarray
    n_bits: int | None = None
    e_labels: tuple[Hashable, ...] | None = None

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.size == 0:
            raise InvalidDistribution("need a non-empty (values x symbols) table")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise InvalidDistribution("probabilities must be finite and nonnegative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise InvalidDistribution(f"probabilities sum to {p.sum()!r}, not 1")
        if self.n_bits is not None and p.shape[0] != 1 << self.n_bits:
            raise InvalidDistribution(f"{p.shape[0]} rows for {self.n_bits}-bit values")
        if self.e_labels is not None and len(self.e_labels) != p.shape[1]:
            raise InvalidDistribution("one label per e column")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_dict(cls, table: Mapping[tuple, float], n_bits: int) -> JointDistribution:
        """Build from {(x, e): p} with x a BitString, bit-string text, or int."""
        labels: list[Hashable] = []
        for (_, e) in table:
            if e not in labels:
                labels.append(e)
        probs = np.zeros((1 << n_bits, len(labels)))
        for (x, e), p in table.items():
            if isinstance(x, str):
                x = BitString.from_str(x)
            if isinstance(x, BitString):
                if len(x) != n_bits:
                    raise InvalidDistribution(f"value {x} is not {n_bits} bits")
                x = x.to_int()
            probs[int(x), labels.index(e)] += p
        return cls(probs, n_bits, tuple(labels))

    @property
    def marginal_e(self) -> np.ndarray:
        return self.probs.sum(axis=0)

    @property
    def marginal_x(self) -> np.ndarray:
        return self.probs.sum(axis=1)


def guessing_probability(joint: JointDistribution) -> float:
    return float(joint.probs.max(axis=0).sum())


def min_entropy(joint: JointDistribution) -> float:
    """-log2 sum_e max_x P(x, e): the classical conditional min-entropy.

    The optimal sigma_E is diagonal with weights proportional to max_x P(x, e).
    """
    return -math.log2(guessing_probability(joint))


def smoothing_benefit(probs: np.ndarray, epsilon: float) -> float:
    """Largest drop in sum_e max_x P(x, e) from removing at most ``epsilon`` mass.

    Lowering a column's top j atoms together costs j units of mass per unit of
    drop, so cheaper drops (smaller j) are taken first, across all columns.
    """
    ordered = -np.sort(-probs, axis=0)
    padded = np.vstack([ordered, np.zeros((1, ordered.shape[1]))])
    gaps = padded[:-1] - padded[1:]
    j = np.arange(1, ordered.shape[0] + 1)
    cost_by_j = (gaps * j[:, None]).sum(axis=1)
    remaining = epsilon
    benefit = 0.0
    for cost, width in zip(cost_by_j, j):
        if remaining <= 0:
            break
        spend = min(cost, remaining)
        benefit += spend / width
        remaining -= spend
    return benefit


def smooth_min_entropy(joint: JointDistribution, epsilon: float) -> float:
    """Min-entropy maximized over sub-distributions obtained by removing <= epsilon mass."""
    if not 0 <= epsilon < 1:
        raise BadEpsilon(f"epsilon must lie in [0, 1), got {epsilon}")
    if epsilon == 0:
        return min_entropy(joint)
    guess = guessing_probability(joint) - smoothing_benefit(joint.probs, epsilon)
    return -math.log2(guess)


def theorem1_bound(hmin_eps: float, t: int, epsilon: float = 0.0) -> float:
    """Leftover-hash bound: epsilon + 1/2 * 2^(-(hmin_eps - t) / 2)."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    return epsilon + 0.5 * 2.0 ** (-(hmin_eps - t) / 2)


def delta_for_margin(margin: float, epsilon: float = 0.0) -> float:
    """Privacy reached when hashing to ``margin`` bits below the smooth min-entropy."""
    return epsilon + 0.5 * 2.0 ** (-margin / 2)


def exact_distance(probs: np.ndarray) -> float:
    """min over distributions q(e) of 1/2 sum |P(s, e) - q(e)/|S||.

    Each column's cost is convex piecewise linear in q(e) with slopes
    (2k - N) / 2N, where k counts the atoms below q(e)/N.  Allocating the unit
    mass of q to the cheapest slopes first is optimal.
    """
    p = np.asarray(probs, dtype=float)
    n = p.shape[0]
    ordered = np.sort(p, axis=0)
    lengths = n * np.diff(np.vstack([np.zeros((1, p.shape[1])), ordered]), axis=0)
    length_by_k = lengths.sum(axis=1)
    value = 0.5 * p.sum()
    remaining = 1.0
    for k, length in enumerate(length_by_k):
        if remaining <= 0:
            break
        take = min(length, remaining)
        value += (2 * k - n) / (2 * n) * take
        remaining -= take
    value += 0.5 * max(remaining, 0.0)
    return float(min(max(value, 0.0), 1.0))


def marginal_distance(probs: np.ndarray) -> float:
    """The same distance with q fixed to the true marginal P_E (an upper bound)."""
    p = np.asarray(probs, dtype=float)
    return float(0.5 * np.abs(p - p.sum(axis=0)[None, :] / p.shape[0]).sum())


@dataclass(frozen=True)
class PrivacyAssessment:
    distance: float
    bound: float
    delta_target: float | None
    verdict: str | None
    exact: bool = True


def distance_to_ideal(joint: JointDistribution, delta: float | None = None) -> PrivacyAssessment:
    """Trace distance of P(s, e) to the closest (uniform s) x sigma_E.

    Rows of ``joint`` are values of s.  A diagonal sigma_E is optimal for a
    classical state, so the minimization runs over distributions q(e).
    ``bound`` is the distance at q = P_E.
    """
    distance = exact_distance(joint.probs)
    verdict = None
    if delta is not None:
        verdict = "delta_private" if distance <= delta else "not_delta_private"
    return PrivacyAssessment(distance, marginal_distance(joint.probs), delta, verdict)


def post_hash_table(joint: JointDistribution, t: int, family: str = TOEPLITZ) -> np.ndarray:
    """P(s, (e, r)) with a uniform seed r, shape (2^t, |E| * |R|), columns e-major."""
    n = joint.n_bits
    if n is None:
        raise InvalidDistribution("hashing needs values indexed by n-bit strings")
    if not 0 <= t <= n:
        raise LengthMismatch(f"output length {t} exceeds input length {n}")
    width = seed_length(n, t, family)
    n_e = joint.probs.shape[1]
    if width > MAX_SEED_BITS or (1 << (width + n)) * n_e > MAX_ENUMERATION:
        raise TooLarge(f"{width} seed bits x {n} input bits is beyond enumeration")
    n_seeds = 1 << width
    seeds = _all_bitrows(width) if width else np.zeros((1, 0), dtype=np.uint8)
    inputs = _all_bitrows(n).astype(np.int64)
    weights = (1 << np.arange(t - 1, -1, -1, dtype=np.int64)) if t else np.zeros(0, np.int64)
    out = np.zeros((1 << t, n_e, n_seeds))
    chunk = max(1, (1 << 16) // max(1, 1 << n))
    for start in range(0, n_seeds, chunk):
        mats = _matrices(seeds[start:start + chunk], n, t, family).astype(np.int64)
        hashes = (np.einsum("ctn,xn->cxt", mats, inputs) % 2) @ weights
        for offset, h in enumerate(hashes):
            col = np.zeros((1 << t, n_e))
            np.add.at(col, h, joint.probs)
            out[:, :, start + offset] = col
    return out.reshape(1 << t, n_e * n_seeds) / n_seeds


@dataclass(frozen=True)
class LeftoverHashReport:
    distance: float
    marginal_distance: float
    hmin_eps: float
    t: int
    epsilon: float
    bound: float
    holds: bool
    family: str
    n_seeds: int


def verify_leftover_hash(
    joint_x_e: JointDistribution, t: int, epsilon: float = 0.0, family: str = TOEPLITZ
) -> LeftoverHashReport:
    """Exact distance of the hashed output (seed revealed) against the leftover-hash bound."""
    table = post_hash_table(joint_x_e, t, family)
    distance = exact_distance(table)
    hmin = smooth_min_entropy(joint_x_e, epsilon)
    bound = theorem1_bound(hmin, t, epsilon)
    return LeftoverHashReport(
        distance=distance,
        marginal_distance=marginal_distance(table),
        hmin_eps=hmin,
        t=t,
        epsilon=epsilon,
        bound=bound,
        holds=distance <= bound + 1e-12,
        family=family,
        n_seeds=1 << seed_length(joint_x_e.n_bits, t, family),
    )
