import itertools
import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gevkam.arithmetic import (
    GOLDEN,
    METHODS,
    Envelope,
    Q0Unsatisfiable,
    a_integral,
    build_profile,
    cf_convergents,
    classify,
    comparison_sums,
    liouville_number,
    power_law_profile,
    psi_cf_table,
    psi_of,
    psi_table_brute,
    select_Q0,
)


def brute_psi(omega, Q):
    """Independent enumeration of the l1 ball."""
    n = len(omega)
    best = 0.0
    for k in itertools.product(range(-Q, Q + 1), repeat=n):
        if 0 < sum(map(abs, k)) <= Q:
            best = max(best, 1.0 / abs(sum(a * b for a, b in zip(k, omega))))
    return best


@pytest.fixture(scope="module")
def golden_profile():
    return build_profile((1.0, GOLDEN), 2**14, label="golden")


@pytest.fixture(scope="module")
def liouville_profile():
    return build_profile((1, liouville_number(6)), 2**14, label="liouville")


# -- Psi --------------------------------------------------------------------

def test_psi_detects_exact_resonance():
    for omega in [(1, Fraction(1, 2)), (1.0, 0.5)]:
        rep = psi_of(omega, 3)
        assert rep.resonant and math.isinf(rep.value)
        assert abs(rep.k[0] + rep.k[1] * omega[1]) == 0


def test_psi_golden_first_values():
    assert psi_of((1.0, GOLDEN), 1).value == pytest.approx(1 / GOLDEN, rel=1e-14)
    assert psi_of((1.0, GOLDEN), 2).value == pytest.approx(1 / (1 - GOLDEN), rel=1e-14)
    assert 1 / (1 - GOLDEN) == pytest.approx(GOLDEN**-2, rel=1e-14)


def test_psi_rejects_small_Q():
    with pytest.raises(ValueError):
        psi_of((1.0, GOLDEN), 0.5)


@pytest.mark.parametrize("omega", [(1.0, GOLDEN), (1.0, math.sqrt(2) - 1, math.sqrt(3) - 1.5)])
def test_psi_matches_enumeration(omega):
    for Q in (1, 2, 5, 9):
        assert psi_of(omega, Q).value == pytest.approx(brute_psi(omega, Q), rel=1e-13)


def test_cf_table_equals_brute_force_up_to_200():
    for nu in (GOLDEN, liouville_number(4), math.sqrt(2) - 1, -GOLDEN):
        cf, _ = psi_cf_table(nu, 200)
        brute, _ = psi_table_brute((1, nu), 200)
        np.testing.assert_array_equal(cf, brute)


@settings(max_examples=15, deadline=None)
@given(st.floats(-1, 1).filter(lambda x: abs(x) > 1e-3), st.floats(-1, 1))
def test_psi_non_decreasing(a, b):
    table, resonant = psi_table_brute((1.0, a, b), 12)
    if not resonant:
        assert np.all(np.diff(table) >= 0)


# -- continued fractions ------------------------------------------------------

def test_golden_convergents_are_fibonacci():
    convs, truncated = cf_convergents(GOLDEN, 12)
    assert not truncated
    assert convs[:5] == [(1, 1), (1, 2), (2, 3), (3, 5), (5, 8)]
    for (p0, q0), (p1, q1) in zip(convs, convs[1:]):
        assert p1 == q0 and abs(q0 * p1 - p0 * q1) == 1


def test_liouville_denominators_are_powers_of_ten_factorial():
    convs, _ = cf_convergents(liouville_number(6), 40)
    qs = {q for _, q in convs}
    assert {10**2, 10**6, 10**24, 10**120} <= qs


def test_rational_expansion_terminates():
    convs, truncated = cf_convergents(Fraction(5, 8), 20)
    assert truncated and convs[-1] == (5, 8)


def test_cf_psi_formula():
    # Psi(Q) = 1/|q_k nu - p_k| for q_k + p_k <= Q < q_{k+1} + p_{k+1} (l1 size of (-p, q))
    table, _ = psi_table_brute((1.0, GOLDEN), 200)
    convs, _ = cf_convergents(GOLDEN, 20)
    for (p, q), (p1, q1) in zip(convs[1:], convs[2:]):
        if p1 + q1 > 200:
            break
        for Q in range(p + q, p1 + q1):
            assert table[Q - 1] == pytest.approx(1 / abs(q * GOLDEN - p), rel=1e-12)


def test_liouville_number_exact():
    assert liouville_number(3) == Fraction(1, 10) + Fraction(1, 100) + Fraction(1, 10**6)
    assert liouville_number(0) == 0


# -- envelope -----------------------------------------------------------------

def test_power_law_envelope_closed_forms():
    env = Envelope(power_law_profile(1.0))
    Q = np.array([1.0, 2.5, 17.0, 400.0])
    np.testing.assert_allclose(env.delta(Q), Q**2, rtol=1e-15)
    for x in (1.0, 6.25, 289.0, 1e6):
        assert env.delta_inv(x) == pytest.approx(math.sqrt(x), rel=1e-12)


def test_delta_inverse_roundtrip(golden_profile):
    env = Envelope(golden_profile)
    rng = np.random.default_rng(0)
    for Q in rng.uniform(1, 2 * golden_profile.horizon, size=50):
        assert env.delta_inv(float(env.delta(Q))) == pytest.approx(Q, rel=1e-10)


def test_envelope_sandwich(golden_profile):
    env = Envelope(golden_profile)
    Q = golden_profile.Q[:-1].astype(float)
    psi_env = env.psi(Q)
    assert np.all(golden_profile.psi[:-1] <= psi_env)
    assert np.all(psi_env <= golden_profile.psi[1:])


def test_delta_strictly_increasing(golden_profile):
    Q = np.linspace(1, 3 * golden_profile.horizon, 5000)
    assert np.all(np.diff(Envelope(golden_profile).delta(Q)) > 0)


def test_resonant_profile_has_no_envelope():
    with pytest.raises(ValueError):
        Envelope(build_profile((1, Fraction(2, 3)), 50))


# -- classification -----------------------------------------------------------

@pytest.mark.parametrize("alpha", [1.0, 2.0])
@pytest.mark.parametrize("method", METHODS)
def test_golden_mean_holds(golden_profile, alpha, method):
    assert classify(golden_profile, alpha, method).br_alpha.verdict == "holds"


@pytest.mark.parametrize("method", METHODS)
def test_liouville_example_holds(liouville_profile, method):
    assert classify(liouville_profile, 1.0, method).br_alpha.verdict == "holds"


def test_series_and_dyadic_verdicts_agree(golden_profile, liouville_profile):
    for profile in (golden_profile, liouville_profile):
        for alpha in (1.0, 1.5, 2.0):
            assert classify(profile, alpha, "series_Q").br_alpha.verdict == \
                classify(profile, alpha, "dyadic").br_alpha.verdict


def test_holding_is_inherited_by_smaller_alpha(golden_profile, liouville_profile):
    alphas = (1.0, 1.5, 2.0, 3.0)
    for profile in (golden_profile, liouville_profile):
        verdicts = [classify(profile, a).br_alpha.verdict for a in alphas]
        for i, v in enumerate(verdicts):
            if v == "holds":
                assert all(w == "holds" for w in verdicts[:i])


@pytest.mark.parametrize("alpha", [1.0, 2.0, 3.0])
def test_diophantine_profile_holds(alpha):
    assert classify(power_law_profile(1.2), alpha).br_alpha.verdict == "holds"


def test_resonant_profile_classified():
    rep = classify(build_profile((1, Fraction(1, 2)), 20), 1.0)
    assert rep.resonant and rep.br_alpha.verdict == "fails"


def test_cf_method_requires_two_frequencies():
    profile = build_profile((1.0, math.sqrt(2) - 1, math.sqrt(3) - 1.5), 30)
    with pytest.raises(ValueError):
        classify(profile, 1.0, "cf")


def test_no_overflow_warnings_in_tail_sums(golden_profile):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        classify(golden_profile, 1.0, "dyadic")


# -- comparison sums ----------------------------------------------------------

@pytest.mark.parametrize("alpha", [1.0, 2.0])
def test_comparison_upper_bound(golden_profile, liouville_profile, alpha):
    for profile in (golden_profile, liouville_profile):
        assert comparison_sums(profile, alpha, 10**4)["upper_ok"].all()


def test_comparison_lower_bound_alpha_one(golden_profile, liouville_profile):
    for profile in (golden_profile, liouville_profile):
        assert comparison_sums(profile, 1.0, 10**4)["lower_ok"].all()


def test_comparison_lower_bound_with_attainable_constant(golden_profile, liouville_profile):
    # each dyadic block contributes at least alpha (1 - 2**(-1/alpha)) of its dyadic term
    alpha = 2.0
    const = alpha * (1 - 2 ** (-1 / alpha))
    for profile in (golden_profile, liouville_profile):
        sums = comparison_sums(profile, alpha, 10**4)
        assert np.all(const * sums["f3_lower"] <= sums["f2"] * (1 + 1e-12))


# -- Q0 -----------------------------------------------------------------------

@pytest.mark.parametrize("Q0", [10, 100, 1000])
@pytest.mark.parametrize("alpha", [1.0, 2.0])
def test_q0_integral_matches_closed_form(Q0, alpha):
    tau = 1.2
    val = a_integral(power_law_profile(tau), alpha, Q0).value
    assert val == pytest.approx(alpha * (tau + 1) * Q0 ** (-1 / alpha), rel=1e-8)


def test_q0_clamped_below_for_large_width():
    assert select_Q0(power_law_profile(1.2), 1.0, s=1e6).Q0 == 4


def test_q0_unsatisfiable_for_tiny_width(golden_profile):
    with pytest.raises(Q0Unsatisfiable) as err:
        select_Q0(golden_profile, 1.0, s=1e-6)
    assert err.value.achieved > err.value.target


def test_q0_is_minimal(golden_profile):
    choice = select_Q0(golden_profile, 1.0, s=0.1)
    assert choice.lhs <= choice.rhs
    below = select_Q0.__globals__["q0_condition_lhs"](golden_profile, 1.0, choice.Q0 - 1)
    assert sum(below) > choice.rhs
