import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from privex.amplify import (
    COMPACT,
    TOEPLITZ,
    JointDistribution,
    ToeplitzSeed,
    compact_toeplitz_hash,
    distance_to_ideal,
    exact_distance,
    family_collision_check,
    marginal_distance,
    min_entropy,
    post_hash_table,
    seed_length,
    smooth_min_entropy,
    theorem1_bound,
    toeplitz_hash,
    toeplitz_matrix,
    verify_leftover_hash,
)
from privex.bits import BitString
from privex.errors import BadEpsilon, InvalidDistribution, LengthMismatch, TooLarge

# frozen from a scipy.linalg.toeplitz matrix product (first column seed[n-1:], first row seed[n-1::-1])
TOEPLITZ_FIXTURES = [("11111", "1010", 2, "00"), ("10110", "1101", 2, "11"), ("0110100", "110010", 2, "01")]


def scipy_toeplitz_hash(seed, x, t):
    n = len(x)
    s = [int(c) for c in seed]
    m = scipy.linalg.toeplitz(s[n - 1:n - 1 + t], s[n - 1::-1])
    return "".join(str(v) for v in m.dot([int(c) for c in x]) % 2)


def hash_fn(family, x, seed_bits, t):
    if family == TOEPLITZ:
        return toeplitz_hash(x, ToeplitzSeed(seed_bits, len(x), t))
    return compact_toeplitz_hash(x, seed_bits, t)


def brute_collision(n, t, family):
    width = seed_length(n, t, family)
    seeds = [BitString(b) for b in itertools.product((0, 1), repeat=width)]
    inputs = [BitString(b) for b in itertools.product((0, 1), repeat=n)]
    table = {x: [hash_fn(family, x, s, t) for s in seeds] for x in inputs}
    worst = Fraction(0)
    for a, b in itertools.combinations(inputs, 2):
        same = sum(ha == hb for ha, hb in zip(table[a], table[b]))
        worst = max(worst, Fraction(same, len(seeds)))
    return worst


def grid_min_entropy(probs, steps=200):
    """max over sigma_E on a simplex grid of -log2 min{lambda : P(x,e) <= lambda sigma(e)}."""
    n_e = probs.shape[1]
    col_max = probs.max(axis=0)
    best = math.inf
    for counts in itertools.product(range(steps + 1), repeat=n_e - 1):
        if sum(counts) > steps:
            continue
        sigma = np.array(list(counts) + [steps - sum(counts)]) / steps
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(col_max > 0, col_max / sigma, 0.0)
        best = min(best, float(np.max(ratio)))
    return -math.log2(best)


def linprog_distance(probs):
    n_s, n_e = probs.shape
    n_u = n_s * n_e
    # variables: u (n_u), q (n_e); minimize 1/2 sum u
    c = np.concatenate([0.5 * np.ones(n_u), np.zeros(n_e)])
    rows, rhs = [], []
    for s in range(n_s):
        for e in range(n_e):
            k = s * n_e + e
            for sign in (1, -1):
                row = np.zeros(n_u + n_e)
                row[k] = -1
                row[n_u + e] = -sign / n_s
                rows.append(row)
                rhs.append(-sign * probs[s, e])
    eq = np.concatenate([np.zeros(n_u), np.ones(n_e)])[None, :]
    res = linprog(c, A_ub=np.array(rows), b_ub=np.array(rhs), A_eq=eq, b_eq=[1.0],
                  bounds=[(0, None)] * (n_u + n_e), method="highs")
    return res.fun


def level_smooth(p, epsilon):
    """Single-column oracle: bisect the smallest cap L with sum max(0, p - L) <= epsilon."""
    lo, hi = 0.0, max(p)
    for _ in range(200):
        mid = (lo + hi) / 2
        if sum(max(0.0, a - mid) for a in p) <= epsilon:
            hi = mid
        else:
            lo = mid
    return -math.log2(hi)


def brute_smooth(p, epsilon, step=0.01):
    """Grid oracle: remove mass in `step` units; only reaches grid-aligned caps."""
    units = int(round(epsilon / step))
    best = max(p)
    for removal in itertools.product(range(units + 1), repeat=len(p)):
        if sum(removal) > units:
            continue
        reduced = [max(0.0, a - r * step) for a, r in zip(p, removal)]
        best = min(best, max(reduced))
    return -math.log2(best)


def random_joint(rng, n_bits, n_e, alpha=0.5):
    probs = rng.dirichlet(np.full((1 << n_bits) * n_e, alpha)).reshape(1 << n_bits, n_e)
    return JointDistribution(probs, n_bits)


@pytest.mark.parametrize("seed,x,t,expected", TOEPLITZ_FIXTURES)
def test_toeplitz_fixtures(seed, x, t, expected):
    assert scipy_toeplitz_hash(seed, x, t) == expected
    out = toeplitz_hash(BitString.from_str(x), ToeplitzSeed(BitString.from_str(seed), len(x), t))
    assert str(out) == expected


def test_toeplitz_matrix_layout_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 9))
        t = int(rng.integers(1, n + 1))
        bits = BitString.from_array(rng.integers(0, 2, n + t - 1))
        s = bits.to_array()
        expected = scipy.linalg.toeplitz(s[n - 1:n - 1 + t], s[n - 1::-1])
        np.testing.assert_array_equal(toeplitz_matrix(ToeplitzSeed(bits, n, t)), expected)


def test_zero_seed_gives_zero():
    out = toeplitz_hash(BitString.from_str("1101"), ToeplitzSeed(BitString([0] * 5), 4, 2))
    assert str(out) == "00"


def test_seed_validation():
    with pytest.raises(LengthMismatch):
        ToeplitzSeed(BitString([0] * 6), 2, 3)
    with pytest.raises(LengthMismatch):
        ToeplitzSeed(BitString([0] * 4), 4, 2)


def test_large_compact_hash_matches_dense_definition():
    rng = np.random.default_rng(5)
    n, t = 2500, 1700
    x = BitString.from_array(rng.integers(0, 2, n))
    seed = BitString.from_array(rng.integers(0, 2, n - 1))
    s = seed.to_array()
    block = scipy.linalg.toeplitz(s[n - t - 1:], s[n - t - 1::-1])
    dense = (np.hstack([np.eye(t, dtype=int), block]) @ x.to_array()) % 2
    assert compact_toeplitz_hash(x, seed, t) == BitString.from_array(dense)


@pytest.mark.parametrize("n,t", [(4, 2), (2, 2), (1, 1), (3, 1), (5, 3)])
def test_collision_matches_brute_force_toeplitz(n, t):
    exact = family_collision_check(n, t, TOEPLITZ)
    assert exact == brute_collision(n, t, TOEPLITZ)
    assert exact <= Fraction(1, 2 ** t)


@pytest.mark.parametrize("n,t", [(4, 2), (6, 3), (3, 1), (5, 4), (4, 4)])
def test_collision_matches_brute_force_compact(n, t):
    exact = family_collision_check(n, t, COMPACT)
    assert exact == brute_collision(n, t, COMPACT)
    assert exact <= Fraction(1, 2 ** t)


def test_two_universality_exhaustive_up_to_twelve_seed_bits():
    for n in range(1, 13):
        for t in range(1, n + 1):
            if n + t - 1 > 12:
                continue
            assert family_collision_check(n, t, TOEPLITZ) <= Fraction(1, 2 ** t)
            assert family_collision_check(n, t, COMPACT) <= Fraction(1, 2 ** t)


def test_collision_too_large():
    with pytest.raises(TooLarge):
        family_collision_check(16, 8, TOEPLITZ)


def test_min_entropy_examples():
    assert min_entropy(JointDistribution(np.full(4, 0.25))) == pytest.approx(2.0)
    assert min_entropy(JointDistribution(np.eye(4) / 4)) == pytest.approx(0.0)
    assert min_entropy(JointDistribution(np.array([0.5, 0.25, 0.25]))) == pytest.approx(1.0)
    with pytest.raises(InvalidDistribution):
        JointDistribution(np.array([0.5, 0.6]))


def test_min_entropy_matches_sigma_grid_search():
    rng = np.random.default_rng(2)
    for n_e in (1, 2, 3):
        for _ in range(5):
            probs = rng.dirichlet(np.ones(4 * n_e)).reshape(4, n_e)
            grid = grid_min_entropy(probs, steps=400 if n_e < 3 else 120)
            exact = min_entropy(JointDistribution(probs))
            # the grid only ever finds feasible sigma, so it lower-bounds the optimum
            assert grid <= exact + 1e-9
            assert exact - grid < 0.05


def test_min_entropy_independent_e():
    px = np.array([0.5, 0.3, 0.2])
    pe = np.array([0.6, 0.4])
    joint = JointDistribution(np.outer(px, pe))
    assert min_entropy(joint) == pytest.approx(-math.log2(0.5))


def test_smooth_examples():
    joint = JointDistribution(np.array([0.6, 0.4]))
    assert smooth_min_entropy(joint, 0.2) == pytest.approx(-math.log2(0.4), abs=1e-12)
    assert smooth_min_entropy(joint, 0.0) == min_entropy(joint)
    with pytest.raises(BadEpsilon):
        smooth_min_entropy(joint, 1.0)


def test_smooth_matches_discretized_brute_force():
    rng = np.random.default_rng(9)
    for _ in range(20):
        atoms = rng.integers(1, 40, size=int(rng.integers(2, 5)))
        p = atoms / atoms.sum()
        p = np.round(p, 2)
        p[-1] = 1 - p[:-1].sum()
        if np.any(p <= 0):
            continue
        eps = float(rng.integers(0, 20)) / 100
        exact = smooth_min_entropy(JointDistribution(p), eps)
        assert exact == pytest.approx(level_smooth(list(p), eps), abs=1e-9)
        # a grid search only finds feasible smoothings, so it never beats the optimum
        assert brute_smooth(list(p), eps) <= exact + 1e-9


def test_smooth_across_columns_matches_linprog():
    # min sum_e m_e s.t. removal <= eps: LP over per-atom removals
    rng = np.random.default_rng(4)
    for _ in range(20):
        probs = rng.dirichlet(np.ones(8)).reshape(4, 2)
        eps = float(rng.uniform(0, 0.5))
        n_x, n_e = probs.shape
        k = n_x * n_e
        # variables: removals r (k), column caps m (n_e)
        c = np.concatenate([np.zeros(k), np.ones(n_e)])
        rows, rhs = [], []
        for x in range(n_x):
            for e in range(n_e):
                row = np.zeros(k + n_e)
                row[x * n_e + e] = -1
                row[k + e] = -1
                rows.append(row)
                rhs.append(-probs[x, e])
        rows.append(np.concatenate([np.ones(k), np.zeros(n_e)]))
        rhs.append(eps)
        bounds = [(0, probs[x, e]) for x in range(n_x) for e in range(n_e)] + [(0, None)] * n_e
        res = linprog(c, A_ub=np.array(rows), b_ub=rhs, bounds=bounds, method="highs")
        assert smooth_min_entropy(JointDistribution(probs), eps) == pytest.approx(-math.log2(res.fun), abs=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 0.9), st.floats(0, 0.09))
def test_smooth_monotone_in_epsilon(seed, eps, bump):
    joint = random_joint(np.random.default_rng(seed), 2, 2)
    assert smooth_min_entropy(joint, eps + bump) >= smooth_min_entropy(joint, eps) - 1e-12


def test_leftover_bound_examples():
    assert theorem1_bound(10, 6, 0) == pytest.approx(0.125)
    assert theorem1_bound(5, 5, 0) == pytest.approx(0.5)
    assert theorem1_bound(10, 6, 0.01) == pytest.approx(0.135)


def test_distance_examples():
    uniform = JointDistribution(np.full((2, 3), 1 / 6))
    assert distance_to_ideal(uniform).distance == pytest.approx(0.0, abs=1e-15)
    copy = JointDistribution(np.eye(2) / 2)
    assert distance_to_ideal(copy).distance == pytest.approx(0.5)
    # grid oracle over q(e) at resolution 1e-4
    grid = min(0.5 * np.abs(np.eye(2) / 2 - np.array([q, 1 - q])[None, :] / 2).sum()
               for q in np.linspace(0, 1, 10_001))
    assert grid == pytest.approx(0.5)
    report = distance_to_ideal(copy, delta=0.1)
    assert report.verdict == "not_delta_private"
    assert distance_to_ideal(uniform, delta=0.1).verdict == "delta_private"


def test_exact_distance_matches_linprog():
    rng = np.random.default_rng(12)
    for _ in range(40):
        n_s = int(rng.choice([2, 4, 8]))
        n_e = int(rng.integers(1, 20))
        probs = rng.dirichlet(np.full(n_s * n_e, 0.4)).reshape(n_s, n_e)
        assert exact_distance(probs) == pytest.approx(linprog_distance(probs), abs=1e-9)
        assert exact_distance(probs) <= marginal_distance(probs) + 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_data_processing_merging_e(seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.full(16, 0.5)).reshape(4, 4)
    labels = rng.integers(0, 2, size=4)
    merged = np.stack([probs[:, labels == k].sum(axis=1) for k in (0, 1)], axis=1)
    assert exact_distance(merged) <= exact_distance(probs) + 1e-12


def test_leftover_examples():
    flat = JointDistribution(np.full(16, 1 / 16), 4)
    report = verify_leftover_hash(flat, 2)
    # not 0: the zero and rank-1 Toeplitz seeds are revealed and skew s
    assert report.distance == pytest.approx(linprog_distance(post_hash_table(flat, 2)), abs=1e-9)
    assert report.distance == pytest.approx(0.0625) and report.holds
    full_rank = [r for r in range(32)
                 if np.linalg.matrix_rank(toeplitz_matrix(ToeplitzSeed(BitString.from_int(r, 5), 4, 2))
                                          .astype(float)) == 2]
    for r in full_rank:
        m = toeplitz_matrix(ToeplitzSeed(BitString.from_int(r, 5), 4, 2)).astype(int)
        images = [tuple(m @ np.array(x) % 2) for x in itertools.product((0, 1), repeat=4)]
        assert len(set(images)) == 4 and all(images.count(i) == 4 for i in set(images))
    first_bit = JointDistribution.from_dict(
        {(BitString.from_int(x, 4), x >> 3): 1 / 16 for x in range(16)}, 4)
    assert min_entropy(first_bit) == pytest.approx(3.0)
    report = verify_leftover_hash(first_bit, 1)
    assert report.bound == pytest.approx(0.25)
    assert report.distance <= 0.25 and report.holds
    assert report.n_seeds == 16
    copy = JointDistribution(np.eye(16) / 16, 4)
    report = verify_leftover_hash(copy, 4)
    assert report.bound >= 0.5 and report.distance > 0.4 and report.holds


def test_post_hash_table_is_distribution():
    joint = random_joint(np.random.default_rng(1), 3, 2)
    for family in (TOEPLITZ, COMPACT):
        table = post_hash_table(joint, 2, family)
        assert table.sum() == pytest.approx(1.0)
        # seed is independent of (x, e): each seed column group carries P_E / |R|
        n_r = 1 << seed_length(3, 2, family)
        per_e = table.sum(axis=0).reshape(2, n_r)
        np.testing.assert_allclose(per_e, np.broadcast_to(joint.marginal_e[:, None] / n_r, per_e.shape))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 3),
       st.sampled_from([TOEPLITZ, COMPACT]), st.sampled_from([0.0, 0.05]))
def test_leftover_bound_property(seed, n, n_e, family, eps):
    rng = np.random.default_rng(seed)
    t = int(rng.integers(0, n + 1))
    joint = random_joint(rng, n, n_e, alpha=float(rng.choice([0.1, 1.0])))
    assert verify_leftover_hash(joint, t, eps, family).holds
