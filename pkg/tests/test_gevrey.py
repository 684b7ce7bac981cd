import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gevkam.gevrey import (
    GEVREY_CONSTANT,
    GevreyParams,
    check_majorization,
    derivative_jet,
    grid_norm,
    majorant,
    norm_report,
    norm_trig_poly,
    product_lemma_ratios,
    shifted_tilde_identity_error,
    verify_estimates,
    verify_lemma_comp,
    verify_lemma_product,
    verify_tilde_bar_direct,
)
from gevkam.series import FourierTaylorSeries, add_scale, multiply

from helpers import brute_norm, random_series

C = 4 * math.pi**2 / 3
seeds = st.integers(min_value=0, max_value=2**32 - 1)


def cos1(K=None):
    return FourierTaylorSeries.trig((1, 0), cos=1.0, K=K)


def test_constant_is_pinned():
    assert GEVREY_CONSTANT == 4 * math.pi**2 / 3
    assert GevreyParams(1, 1).c == GEVREY_CONSTANT


def test_params_reject_invalid():
    with pytest.raises(ValueError):
        GevreyParams(0.5, 1.0)
    with pytest.raises(ValueError):
        GevreyParams(1.0, 0.0)


def test_norm_of_constant():
    f = FourierTaylorSeries.constant(-2.5, 2, K=3)
    assert norm_trig_poly(f, GevreyParams(1.7, 0.3)) == pytest.approx(C * 2.5, rel=1e-15)


def test_norm_of_cosine_with_unit_derivative_factor():
    # 2 pi s**alpha = 1 at alpha = 2; terms c (l+1)**2 / l!**2 peak at l = 1
    params = GevreyParams(2.0, (2 * math.pi) ** -0.5)
    rep = norm_report(cos1(), params)
    assert rep.value == pytest.approx(4 * C, rel=1e-12)
    assert rep.argmax_order == 1


@pytest.mark.parametrize("alpha,s", [(1.0, 0.5), (1.0, 1.0), (2.0, 0.5), (1.5, 0.2), (3.0, 1.0)])
def test_norm_matches_brute_force_scan(alpha, s):
    f = random_series(21, K=5, terms=6)
    assert norm_trig_poly(f, GevreyParams(alpha, s)) == pytest.approx(brute_norm(f, alpha, s), rel=1e-10)


def test_norm_scan_reaches_distant_peak():
    # alpha = 1, 2 pi s |k| = 60: the terms peak at l = 61
    f = FourierTaylorSeries.trig((3, 0), cos=1.0)
    s = 10 / math.pi
    rep = norm_report(f, GevreyParams(1.0, s))
    assert rep.argmax_order == 61
    assert rep.scan_order >= rep.argmax_order
    assert rep.value == pytest.approx(brute_norm(f, 1.0, s, L=300), rel=1e-10)


@pytest.mark.parametrize("order", [1, 3, 7, 12, 20])
@pytest.mark.parametrize("alpha", [1.0, 2.0])
@pytest.mark.parametrize("s", [0.5, 1.0])
def test_cosine_mode_bound_on_2pi_torus(order, alpha, s):
    f = FourierTaylorSeries.trig((order, 0), cos=1.0)
    value = norm_trig_poly(f, GevreyParams(alpha, s), torus_period=2 * math.pi)
    assert value <= C * math.exp(s * alpha * (4 * order) ** (1 / alpha))


def test_grid_norm_never_exceeds_certified_norm():
    f = random_series(22, K=4, terms=8)
    params = GevreyParams(1.0, 0.3)
    assert grid_norm(f, params) <= norm_trig_poly(f, params) * (1 + 1e-12)


def test_grid_norm_is_exact_for_single_axis_mode():
    params = GevreyParams(1.0, 0.2)
    assert grid_norm(cos1(), params) == pytest.approx(norm_trig_poly(cos1(), params), rel=1e-12)


# -- majorants --------------------------------------------------------------

def test_majorant_low_coefficients():
    params = GevreyParams(1.0, 0.7)
    assert majorant(params, 3, "M").coeffs[0] == pytest.approx(1 / C, rel=1e-15)
    assert majorant(params, 3, "Mbar").coeffs[0] == 0.0
    assert majorant(params, 3, "Mtilde").coeffs[0] == pytest.approx(1 / (4 * C), rel=1e-15)


def test_majorant_coefficients_nonnegative_and_large_orders_finite_in_log():
    m = majorant(GevreyParams(3.0, 0.1), 500, "M")
    assert np.all(m.mantissa >= 0)
    assert np.all(np.isfinite(m.log_coeffs))


def test_majorant_rejects_bad_input():
    with pytest.raises(ValueError):
        majorant(GevreyParams(1, 1), -1)
    with pytest.raises(ValueError):
        majorant(GevreyParams(1, 1), 3, "other")


@pytest.mark.parametrize("alpha", [1.0, 1.5, 2.0, 3.0])
@pytest.mark.parametrize("s", [0.1, 1.0, 4.0])
def test_tilde_bar_identity(alpha, s):
    assert shifted_tilde_identity_error(GevreyParams(alpha, s), 300) <= 1e-12


def test_majorization_of_zero_jet():
    assert check_majorization([0.0] * 5, majorant(GevreyParams(1, 1), 4)) == (True, None)


def test_majorization_is_tight_at_the_norm():
    params = GevreyParams(1.0, 0.4)
    rep = norm_report(cos1(), params)
    jet = derivative_jet(cos1(), 60)
    M = majorant(params, 60)
    assert check_majorization(jet, M.scaled(rep.value))[0]
    ok, order = check_majorization(jet, M.scaled(0.99 * rep.value))
    assert not ok and order == rep.argmax_order


def test_majorization_reports_inflated_entry():
    params = GevreyParams(1.0, 0.4)
    jet = derivative_jet(cos1(), 20)
    F = majorant(params, 20).scaled(norm_trig_poly(cos1(), params))
    jet[7] = 2 * F.coeffs[7]
    assert check_majorization(jet, F) == (False, 7)


# -- majorant lemmas --------------------------------------------------------

def test_product_lemma_first_ratio():
    assert product_lemma_ratios(1.0, 3)[0] == pytest.approx(1 / C, rel=1e-14)


def brute_product_ratio(alpha: float, l: int) -> float:
    with mpmath.workdps(40):
        def w(j):
            return mpmath.factorial(j) ** (alpha - 1) / (j + 1) ** 2
        lhs = sum(w(j) * w(l - j) for j in range(l + 1))
        return float(lhs / (C * w(l)))


@pytest.mark.parametrize("alpha", [1.0, 2.0])
def test_product_lemma_ratios_match_brute_force(alpha):
    ratios = product_lemma_ratios(alpha, 40)
    for l in (0, 1, 5, 17, 40):
        assert ratios[l] == pytest.approx(brute_product_ratio(alpha, l), rel=1e-12)


@pytest.mark.parametrize("alpha", [1.0, 1.5, 2.0])
def test_majorant_lemmas_hold(alpha):
    params = GevreyParams(alpha, 0.5)
    assert verify_lemma_product(params, 500).passed
    assert all(r.passed for r in verify_lemma_comp(params, 500))


def test_tilde_bar_product_by_series_multiplication():
    assert verify_tilde_bar_direct(GevreyParams(1.5, 0.3), 200).passed


def test_lemma_report_serializes():
    d = verify_lemma_product(GevreyParams(1, 1), 10).to_dict()
    assert {"inequality", "lhs", "rhs", "margin", "budget", "pass"} <= set(d)


# -- estimates on series ----------------------------------------------------

def test_estimates_for_constant_factor():
    params = GevreyParams(1.0, 0.5)
    one = FourierTaylorSeries.constant(1.0, 2)
    f = random_series(23, K=3)
    reports = verify_estimates(f, one, params, 0.25)
    assert all(r.passed for r in reports)
    assert reports[0].lhs == pytest.approx(norm_trig_poly(f, params), rel=1e-12)
    assert reports[0].rhs == pytest.approx(norm_trig_poly(f, params) * C, rel=1e-12)


def test_product_of_cosines_has_strict_margin():
    params = GevreyParams(1.0, 0.5)
    rep = verify_estimates(cos1(), cos1(), params, 0.25)[0]
    assert rep.lhs < rep.rhs


def test_composition_with_zero_shift_loses_width_only():
    params = GevreyParams(1.0, 0.5)
    comp = verify_estimates(cos1(), cos1(), params, 0.2)[-1]
    assert not comp.details["skipped"]
    assert comp.lhs == pytest.approx(norm_trig_poly(cos1(), params.with_width(0.3)), rel=1e-10)
    assert comp.passed


def test_composition_skipped_when_shift_too_large():
    params = GevreyParams(1.0, 0.5)
    u = [FourierTaylorSeries.trig((0, 1), sin=1.0), FourierTaylorSeries.zeros(2, 0)]
    comp = verify_estimates(cos1(), cos1(), params, 0.1, perturbation=u)[-1]
    assert comp.details["skipped"]


def test_estimates_reject_bad_sigma():
    with pytest.raises(ValueError):
        verify_estimates(cos1(), cos1(), GevreyParams(1, 0.5), 0.5)


@settings(max_examples=25, deadline=None)
@given(seeds, st.floats(0.5, 5.0))
def test_norm_is_homogeneous(seed, a):
    f = random_series(seed, K=4)
    params = GevreyParams(1.3, 0.4)
    assert norm_trig_poly(f * a, params) == pytest.approx(a * norm_trig_poly(f, params), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(seeds, st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_norm_non_decreasing_in_width(seed, s1, s2):
    f = random_series(seed, K=4)
    lo, hi = sorted((s1, s2))
    assert norm_trig_poly(f, GevreyParams(1.5, lo)) <= norm_trig_poly(f, GevreyParams(1.5, hi)) * (1 + 1e-12)


@settings(max_examples=25, deadline=None)
@given(seeds, seeds)
def test_triangle_inequality(a, b):
    f, g = random_series(a, K=4), random_series(b, K=6)
    params = GevreyParams(1.0, 0.5)
    total = norm_trig_poly(add_scale(f, g, 1.0, 1.0), params)
    assert total <= (norm_trig_poly(f, params) + norm_trig_poly(g, params)) * (1 + 1e-12)


@settings(max_examples=25, deadline=None)
@given(seeds, seeds, st.sampled_from([1.0, 2.0]))
def test_banach_algebra(a, b, alpha):
    f, g = random_series(a, K=3), random_series(b, K=3)
    params = GevreyParams(alpha, 0.5)
    prod = norm_trig_poly(multiply(f, g, K_out=6), params)
    assert prod <= norm_trig_poly(f, params) * norm_trig_poly(g, params) * (1 + 1e-12)
