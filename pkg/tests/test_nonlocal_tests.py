import itertools
import time
from fractions import Fraction

import numpy as np
import pytest

from privex.bits import BitString
from privex.errors import TooLargeK, UnknownSetting, UnsupportedK, WrongWidth
from privex.nonlocal_tests import (
    NonlocalTest,
    classical_max_pass_probability,
    encode_setting,
    honest_observables,
    make_test,
    passing_outcomes,
    validate_and_decode,
)
from privex.quantum import PAULI_PAIR, ghz_state, joint_outcome_distribution, verify_ghz_relations


def brute_classical(test):
    """Plain nested-loop oracle over deterministic assignments."""
    n = test.n_devices
    best = 0
    for values in itertools.product((1, -1), repeat=2 * n):
        p, q = values[:n], values[n:]
        met = 0
        for setting, required in zip(test.settings, test.required_products):
            prod = 1
            for i, c in enumerate(setting):
                prod *= p[i] if c == "P" else q[i]
            met += prod == required
        best = max(best, met)
    return Fraction(best, len(test.settings))


def test_make_test_k1_is_ghz():
    test = make_test(1)
    assert test.settings == ("PQQ", "QPQ", "QQP", "PPP")
    assert test.required_products == (1, 1, 1, -1)
    assert test.n_devices == 3 and test.bits_per_setting == 2 and test.bits_per_outcome == 2


def test_make_test_k2():
    test = make_test(2)
    assert len(test.settings) == 8
    assert test.settings[0] == "PQQQQQQ" and test.settings[6] == "QQQQQQP"
    assert test.settings[7] == "P" * 7
    assert test.required_products == (1,) * 7 + (-1,)
    assert test.bits_per_setting == 3 and test.bits_per_outcome == 6


def test_make_test_k3_unsupported():
    with pytest.raises(UnsupportedK):
        make_test(3)
    with pytest.raises(UnsupportedK):
        make_test(0)


def test_encode_setting():
    assert encode_setting(make_test(1), BitString.from_str("11")) == "PPP"
    assert encode_setting(make_test(1), BitString.from_str("00")) == "PQQ"
    assert encode_setting(make_test(2), BitString.from_str("111")) == "P" * 7
    with pytest.raises(WrongWidth):
        encode_setting(make_test(1), BitString.from_str("1"))


def test_validate_and_decode_examples():
    test = make_test(1)
    assert validate_and_decode(test, "PPP", (1, 1, -1)) == (True, BitString.from_str("00"))
    assert validate_and_decode(test, "PPP", (1, 1, 1)) == (False, None)
    passed, bits = validate_and_decode(make_test(2), "P" * 7, (-1, 1, 1, 1, 1, 1, 1))
    assert passed and str(bits) == "100000"
    with pytest.raises(UnknownSetting):
        validate_and_decode(test, "QQQ", (1, 1, 1))


@pytest.mark.parametrize("k", [1, 2])
def test_decode_round_trip_by_enumeration(k):
    test = make_test(k)
    for setting in test.settings:
        decoded = {}
        for outcome in itertools.product((1, -1), repeat=test.n_devices):
            passed, bits = validate_and_decode(test, setting, outcome)
            if passed:
                assert bits not in decoded
                decoded[bits] = outcome
        assert len(decoded) == 2 ** test.bits_per_outcome
        assert sorted(decoded.values()) == sorted(passing_outcomes(test, setting))


def test_classical_oracle_values():
    start = time.perf_counter()
    assert classical_max_pass_probability(make_test(1)) == Fraction(3, 4)
    assert classical_max_pass_probability(make_test(2)) == Fraction(7, 8)
    assert time.perf_counter() - start < 10


def test_classical_matches_brute_force_k1():
    assert classical_max_pass_probability(make_test(1)) == brute_classical(make_test(1))


def test_classical_degenerate_single_setting():
    assert classical_max_pass_probability(NonlocalTest(("PPP",), (-1,))) == 1


def test_classical_random_small_tests_match_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(1, 4))
        all_settings = ["".join(s) for s in itertools.product("PQ", repeat=n)]
        m = int(rng.integers(1, len(all_settings) + 1))
        chosen = tuple(rng.choice(all_settings, size=m, replace=False))
        products = tuple(int(v) for v in rng.choice([1, -1], size=m))
        test = NonlocalTest(chosen, products)
        assert classical_max_pass_probability(test) == brute_classical(test)


def test_classical_too_large():
    with pytest.raises(TooLargeK):
        classical_max_pass_probability(make_test(4))


def test_honest_k1_is_pauli_ghz():
    pairs, state = honest_observables(make_test(1))
    assert pairs == [PAULI_PAIR] * 3
    np.testing.assert_allclose(state.amplitudes, ghz_state(3).amplitudes)
    assert verify_ghz_relations(state, pairs).passed


@pytest.mark.parametrize("k", [1, 2])
def test_honest_support_and_uniformity(k):
    test = make_test(k)
    pairs, state = honest_observables(test)
    for setting, required in zip(test.settings, test.required_products):
        dist = joint_outcome_distribution(state, [p.get(c) for p, c in zip(pairs, setting)])
        for outcome, p in dist.items():
            expected = 2.0 ** -(4 * k - 2) if np.prod(outcome) == required else 0.0
            assert abs(p - expected) <= 1e-10
