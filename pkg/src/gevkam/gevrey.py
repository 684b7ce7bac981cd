"""Gevrey norms of truncated series and the majorant series behind them.

For a trigonometric polynomial ``f = sum c_k exp(i a k.theta)`` every
derivative of total order ``l`` is bounded by the mode sum
``W_l = sum |c_k| (a |k|_1)**l``.  The certified norm is

    c * sup_l (l+1)**2 s**(alpha l) W_l / l!**alpha,     c = 4 pi**2 / 3,

evaluated in log space.  The scan stops at the first order where the ratio
bound of consecutive terms drops below one; factorial growth then makes every
later term smaller, so the supremum is attained in the scanned range.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import mpmath
import numpy as np
from scipy.special import gammaln, logsumexp

from .series import (
    FourierTaylorSeries,
    action_monomials,
    coeffs_to_grid,
    derivative_factors,
    evaluate_at_points,
    grid_points,
    grid_to_coeffs,
    mode_orders,
    multiply,
    add_scale,
    partial_derivative,
)

GEVREY_CONSTANT = 4.0 * math.pi**2 / 3.0
MAX_SCAN_ORDER = 10_000_000


@dataclass(frozen=True)
class GevreyParams:
    """Gevrey exponent ``alpha >= 1`` and width ``s > 0``."""

    alpha: float
    s: float

    def __post_init__(self):
        if not (self.alpha >= 1.0):
            raise ValueError(f"Gevrey exponent must be >= 1, got {self.alpha}")
        if not (self.s > 0.0):
            raise ValueError(f"Gevrey width must be > 0, got {self.s}")

    @property
    def c(self) -> float:
        return GEVREY_CONSTANT

    def with_width(self, s: float) -> "GevreyParams":
        return GevreyParams(self.alpha, s)


@dataclass
class Report:
    """Outcome of one inequality check ``lhs <= rhs`` with an error budget."""

    inequality: str
    lhs: float
    rhs: float
    budget: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        tol = 1e-12 * max(abs(self.rhs), abs(self.lhs), 1e-300)
        return self.lhs - self.rhs <= self.budget + tol

    def to_dict(self) -> dict:
        out = {"inequality": self.inequality, "lhs": self.lhs, "rhs": self.rhs,
               "margin": self.margin, "budget": self.budget, "pass": self.passed}
        out.update(self.details)
        return out


@dataclass(frozen=True)
class NormReport:
    """Certified norm together with the scan data that produced it."""

    value: float
    argmax_order: int
    scan_order: int
    grid_value: float | None = None


# ---------------------------------------------------------------------------
# mode sums
# ---------------------------------------------------------------------------


def _shell_weights(abs_coeffs: np.ndarray, n: int) -> np.ndarray:
    """Sum of ``|c_k|`` over each shell ``|k|_1 = q``; input shape ``(..., box)``."""
    K = (abs_coeffs.shape[-1] - 1) // 2
    orders = mode_orders(n, K).reshape(-1)
    flat = abs_coeffs.reshape(-1, orders.size).sum(axis=0)
    return np.bincount(orders, weights=flat, minlength=K + 1)[: K + 1]


def _action_derivative_weights(coeffs: np.ndarray, n: int, dI: int, radius: float) -> dict:
    """Per action multi-index ``m'``: bound of ``|d_I^m' c_k(I)|`` on ``|I| <= radius``.

    ``coeffs`` has shape ``(components, blocks, box)``.  Returns shell weights
    summed over components, keyed by the derivative order ``|m'|`` (the worst
    multi-index of each order is kept).
    """
    monomials = action_monomials(n, dI)
    best: dict[int, np.ndarray] = {}
    mags = np.abs(coeffs)
    for mp in monomials:
        acc = np.zeros(mags.shape[2:])
        for b, m in enumerate(monomials):
            if any(mi < pi for mi, pi in zip(m, mp)):
                continue
            factor = 1.0
            for mi, pi in zip(m, mp):
                factor *= math.factorial(mi) / math.factorial(mi - pi)
            excess = sum(m) - sum(mp)
            if excess:
                if radius == 0.0:
                    continue
                factor *= radius**excess
            acc = acc + factor * mags[:, b].sum(axis=0)
        w = _shell_weights(acc, n)
        order = sum(mp)
        if order not in best:
            best[order] = [w]
        else:
            best[order].append(w)
    return best


def _scan_length(params: GevreyParams, wavenumber: float, start: int) -> int:
    """First order ``L >= start`` with ratio bound below one."""
    a = params.alpha
    log_growth = a * math.log(params.s) + math.log(wavenumber) if wavenumber > 0 else -math.inf
    # estimate then walk: (L+1)**alpha ~ s**alpha * wavenumber
    guess = max(start, int(math.exp(log_growth / a)) - 2) if log_growth > -math.inf else start
    L = max(start, guess - 8, 0)
    while True:
        log_rho = 2.0 * math.log((L + 2) / (L + 1)) + log_growth - a * math.log(L + 1)
        if log_rho < 0.0:
            return L
        L += 1
        if L > MAX_SCAN_ORDER:
            raise ValueError("norm scan did not terminate; width too large for this series")


def _log_terms(log_weights: np.ndarray, log_wave: np.ndarray, orders: np.ndarray,
               params: GevreyParams, shift: int) -> np.ndarray:
    """``log((l+1)**2 s**(alpha l) W_{l-shift} / l!**alpha)`` for each order ``l``."""
    j = orders - shift
    valid = j >= 0
    jj = np.where(valid, j, 0)
    # log W_j = logsumexp_q (log w_q + j log(a q)), with 0**0 = 1
    zero_shell = np.isneginf(log_wave)
    safe_wave = np.where(zero_shell, 0.0, log_wave)
    mat = log_weights[None, :] + jj[:, None] * safe_wave[None, :]
    if zero_shell.any():
        mat[:, zero_shell] = np.where(jj[:, None] == 0, log_weights[None, zero_shell], -np.inf)
    log_w = logsumexp(mat, axis=1)
    out = 2.0 * np.log(orders + 1.0) + params.alpha * orders * math.log(params.s) + log_w \
        - params.alpha * gammaln(orders + 1.0)
    return np.where(valid, out, -np.inf)


def norm_from_coeffs(
    coeffs: np.ndarray,
    n: int,
    params: GevreyParams,
    torus_period: float = 1.0,
    action_radius: float = 0.0,
) -> NormReport:
    """Certified Gevrey norm of raw coefficient arrays.

    Parameters
    ----------
    coeffs : ndarray
        Shape ``(blocks, box)`` for a scalar series or ``(components, blocks, box)``
        for a vector-valued one; components are combined with the l1 norm.
    n : int
        Number of angles.
    torus_period : float
        Period of each angle; the wavenumber of mode ``k`` is ``2 pi |k|_1 / period``.
    action_radius : float
        Radius of the action ball on which action derivatives are bounded.
    """
    c = np.asarray(coeffs)
    if c.ndim == n + 1:
        c = c[None]
    blocks = c.shape[1]
    dI = next(d for d in range(3) if len(action_monomials(n, d)) == blocks)
    weights_by_order = _action_derivative_weights(c, n, dI, action_radius)
    a = 2.0 * math.pi / torus_period
    K = (c.shape[-1] - 1) // 2
    shells = np.arange(K + 1)
    active = np.zeros(K + 1, dtype=bool)
    for ws in weights_by_order.values():
        for w in ws:
            active |= w > 0
    if not active.any():
        return NormReport(0.0, 0, 0)
    kmax = int(shells[active].max())
    L = _scan_length(params, a * kmax, max(weights_by_order))
    orders = np.arange(L + 1, dtype=float)
    with np.errstate(divide="ignore"):
        log_wave = np.log(a * shells.astype(float))
    best = -np.inf
    argmax = 0
    for shift, ws in weights_by_order.items():
        for w in ws:
            if not (w > 0).any():
                continue
            with np.errstate(divide="ignore"):
                log_w = np.log(w)
            keep = w > 0
            terms = _log_terms(log_w[keep], log_wave[keep], orders, params, shift)
            i = int(np.argmax(terms))
            if terms[i] > best:
                best, argmax = float(terms[i]), i
    return NormReport(GEVREY_CONSTANT * math.exp(best), argmax, L)


def _series_coeffs(f) -> tuple[np.ndarray, int]:
    if isinstance(f, FourierTaylorSeries):
        return f.coeffs, f.n
    comps = list(f)
    if not comps:
        raise ValueError("empty vector-valued function")
    n = comps[0].n
    K = max(g.K for g in comps)
    dI = max(g.dI for g in comps)
    stack = [add_scale(g, FourierTaylorSeries.zeros(n, K, dI), 1.0, 0.0).coeffs for g in comps]
    return np.stack(stack), n


def _angle_order_log_terms(f: FourierTaylorSeries, params: GevreyParams, torus_period: float) -> np.ndarray:
    """Log of the mode-sum term at each angle order of the ``I**0`` block, up to the scan order."""
    w = _shell_weights(np.abs(f.block((0,) * f.n)), f.n)
    keep = w > 0
    if not keep.any():
        return np.full(1, -np.inf)
    a = 2.0 * math.pi / torus_period
    shells = np.arange(len(w), dtype=float)
    L = _scan_length(params, a * shells[keep].max(), 0)
    with np.errstate(divide="ignore"):
        log_wave = np.log(a * shells[keep])
        log_w = np.log(w[keep])
    return _log_terms(log_w, log_wave, np.arange(L + 1, dtype=float), params, 0)


def grid_norm(f: FourierTaylorSeries, params: GevreyParams, N: int | None = None,
              torus_period: float = 1.0, max_order: int | None = None) -> float:
    """Gevrey norm of the ``I**0`` block with every derivative sup taken on a grid.

    Orders are visited in decreasing order of their mode-sum bound, and the
    scan stops once that bound falls below the best grid value, so the result
    equals the grid norm over all orders.  Grid sups can only underestimate
    the true sups, so this is the sharp empirical value.
    """
    N = 4 * f.K + 4 if N is None else N
    base = f.block((0,) * f.n)
    bounds = _angle_order_log_terms(f, params, torus_period)
    if max_order is not None:
        bounds = bounds[: max_order + 1]
    best = -np.inf
    for l in np.argsort(-bounds):
        if bounds[l] <= best or np.isneginf(bounds[l]):
            break
        worst = 0.0
        for combo in itertools.combinations_with_replacement(range(f.n), int(l)):
            j = [0] * f.n
            for i in combo:
                j[i] += 1
            vals = coeffs_to_grid(base * derivative_factors(f.n, f.K, j, torus_period), f.n, N)
            worst = max(worst, float(np.abs(vals).max()))
        if worst == 0.0:
            continue
        log_term = 2 * math.log(l + 1) + params.alpha * l * math.log(params.s) + math.log(worst) \
            - params.alpha * math.lgamma(l + 1)
        best = max(best, log_term)
    return GEVREY_CONSTANT * math.exp(best) if best > -np.inf else 0.0


def norm_report(f, params: GevreyParams, torus_period: float = 1.0, action_radius: float = 0.0,
                with_grid: bool = False, grid_max_order: int | None = None) -> NormReport:
    """Certified norm plus (optionally) the grid-sup estimate over low orders."""
    coeffs, n = _series_coeffs(f)
    rep = norm_from_coeffs(coeffs, n, params, torus_period, action_radius)
    if with_grid and isinstance(f, FourierTaylorSeries):
        g = grid_norm(f, params, torus_period=torus_period, max_order=grid_max_order)
        rep = NormReport(rep.value, rep.argmax_order, rep.scan_order, g)
    return rep


def norm_trig_poly(f, params: GevreyParams, torus_period: float = 1.0, action_radius: float = 0.0) -> float:
    """Certified Gevrey norm of a series or a list of component series."""
    return norm_report(f, params, torus_period, action_radius).value


def unit_mode_norm(order: int, params: GevreyParams, n: int = 1, torus_period: float = 1.0) -> float:
    """Norm of a single mode ``exp(2 pi i k.theta)`` with ``|k|_1 = order``, unit modulus."""
    if order == 0:
        return GEVREY_CONSTANT
    K = order
    c = np.zeros((1,) + (2 * K + 1,) * n, dtype=complex)
    c[(0, 2 * K) + (K,) * (n - 1)] = 1.0
    return norm_from_coeffs(c, n, params, torus_period).value


# ---------------------------------------------------------------------------
# majorant series
# ---------------------------------------------------------------------------

MAJORANT_KINDS = ("M", "Mbar", "Mtilde")


@dataclass(frozen=True)
class MajorantSeries:
    """Coefficients ``F_l`` of ``sum F_l X**l / l!`` as binary mantissa/exponent pairs.

    ``F_l = scale * mantissa[l] * 2**exponent[l]``; the split keeps full
    relative precision at orders where ``l!**alpha`` overflows a float.
    """

    mantissa: np.ndarray
    exponent: np.ndarray
    kind: str = "custom"
    scale: float = 1.0

    @property
    def L(self) -> int:
        return len(self.mantissa) - 1

    @property
    def log_coeffs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.mantissa) + self.exponent * math.log(2.0)

    @property
    def log_scaled(self) -> np.ndarray:
        if self.scale == 0.0:
            return np.full(self.mantissa.shape, -np.inf)
        return self.log_coeffs + math.log(self.scale)

    @property
    def coeffs(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return self.scale * np.ldexp(self.mantissa, self.exponent)

    def scaled(self, factor: float) -> "MajorantSeries":
        if factor < 0:
            raise ValueError("majorants have non-negative coefficients")
        return MajorantSeries(self.mantissa, self.exponent, self.kind, self.scale * factor)


def _majorant_value(params: GevreyParams, l: int, kind: str):
    a = mpmath.mpf(params.alpha)
    s = mpmath.mpf(params.s)
    c = 4 * mpmath.pi**2 / 3
    if kind == "M" or (kind == "Mbar" and l > 0):
        return mpmath.factorial(l) ** a / ((l + 1) ** 2 * s ** (a * l)) / c
    if kind == "Mbar":
        return mpmath.mpf(0)
    return mpmath.factorial(l + 1) ** (a - 1) * mpmath.factorial(l) / ((l + 2) ** 2 * s ** (a * l)) / c


def majorant(params: GevreyParams, L: int, kind: str = "M") -> MajorantSeries:
    """Majorant series ``M``, ``Mbar`` (``M - M(0)``) or ``Mtilde`` up to order ``L``."""
    if L < 0:
        raise ValueError("order must be non-negative")
    if kind not in MAJORANT_KINDS:
        raise ValueError(f"kind must be one of {MAJORANT_KINDS}")
    mant = np.zeros(L + 1)
    expo = np.zeros(L + 1, dtype=np.int64)
    with mpmath.workdps(30):
        for l in range(L + 1):
            value = _majorant_value(params, l, kind)
            if value != 0:
                m, e = mpmath.frexp(value)
                mant[l] = float(m)
                expo[l] = int(e)
    return MajorantSeries(mant, expo, kind)


def shifted_tilde_identity_error(params: GevreyParams, L: int) -> float:
    """Largest relative gap between ``s**-alpha X Mtilde`` and ``Mbar`` up to ``L``."""
    tilde = majorant(params, L, "Mtilde")
    bar = majorant(params, L + 1, "Mbar")
    # coefficient of X**(l+1)/(l+1)! in s**-alpha X Mtilde is (l+1) s**-alpha Mtilde_l
    lhs = tilde.mantissa * np.arange(1, L + 2) * params.s ** (-params.alpha)
    ratio = np.ldexp(lhs, tilde.exponent - bar.exponent[1:]) / bar.mantissa[1:]
    rel = np.abs(ratio - 1.0)
    return float(rel.max()) if rel.size else 0.0


def check_majorization(f_jet: Sequence[float], F: MajorantSeries, rel_tol: float = 1e-12) -> tuple[bool, int | None]:
    """True iff ``f_jet[l] <= F_l`` for every order; also the first violating order."""
    logs = F.log_scaled
    for l, value in enumerate(f_jet):
        if value < 0:
            raise ValueError("jet bounds are absolute values")
        if value == 0.0:
            continue
        if l > F.L:
            return False, l
        if math.log(value) > logs[l] + math.log1p(rel_tol):
            return False, l
    return True, None


def derivative_jet(f: FourierTaylorSeries, L: int, torus_period: float = 1.0) -> np.ndarray:
    """Mode-sum bounds ``W_l`` of all angle derivatives of order ``l <= L``."""
    w = _shell_weights(np.abs(f.block((0,) * f.n)), f.n)
    a = 2.0 * math.pi / torus_period
    q = np.arange(len(w), dtype=float)
    return np.array([float(np.sum(w * (a * q) ** l)) for l in range(L + 1)])


# ---------------------------------------------------------------------------
# lemma checks
# ---------------------------------------------------------------------------


def _pair_log_sums(L: int, weight) -> np.ndarray:
    """``log sum_{j=0}^l exp(weight(j) + weight(l-j))`` for ``l = 0..L``."""
    w = weight(np.arange(L + 1, dtype=float))
    out = np.empty(L + 1)
    for l in range(L + 1):
        out[l] = logsumexp(w[: l + 1] + w[l::-1])
    return out


def product_lemma_ratios(alpha: float, L: int) -> np.ndarray:
    """Ratios of both sides of the coefficient inequality behind ``M**2 << M``."""
    log_c = math.log(GEVREY_CONSTANT)
    lhs = _pair_log_sums(L, lambda j: (alpha - 1) * gammaln(j + 1) - 2 * np.log(j + 1))
    l = np.arange(L + 1, dtype=float)
    rhs = log_c + (alpha - 1) * gammaln(l + 1) - 2 * np.log(l + 1)
    return np.exp(lhs - rhs)


def tilde_square_ratios(alpha: float, L: int) -> np.ndarray:
    """Ratios for ``Mtilde**2 << Mtilde``."""
    log_c = math.log(GEVREY_CONSTANT)
    lhs = _pair_log_sums(L, lambda j: (alpha - 1) * gammaln(j + 2) - 2 * np.log(j + 2))
    l = np.arange(L + 1, dtype=float)
    rhs = log_c + (alpha - 1) * gammaln(l + 2) - 2 * np.log(l + 2)
    return np.exp(lhs - rhs)


def tilde_bar_ratios(alpha: float, L: int) -> np.ndarray:
    """Ratios for ``Mtilde * Mbar << Mbar`` at orders ``1..L`` (the width cancels)."""
    log_c = math.log(GEVREY_CONSTANT)
    out = np.empty(L)
    for l in range(1, L + 1):
        i = np.arange(1, l + 1, dtype=float)
        terms = (alpha - 1) * (gammaln(i + 1) + gammaln(l - i + 2)) - 2 * np.log(i + 1) - 2 * np.log(l - i + 2)
        lhs = logsumexp(terms) - log_c
        rhs = (alpha - 1) * gammaln(l + 1.0) - 2 * math.log(l + 1)
        out[l - 1] = math.exp(lhs - rhs)
    return out


def _ratio_report(name: str, ratios: np.ndarray, offset: int, L: int, alpha: float) -> Report:
    i = int(np.argmax(ratios))
    return Report(name, float(ratios[i]), 1.0, 0.0,
                  {"worst_order": i + offset, "L": L, "alpha": alpha})


def verify_lemma_product(params: GevreyParams, L: int) -> Report:
    """Check ``M**2 << M`` coefficientwise for orders ``0..L``; ``lhs`` is the worst ratio."""
    if L < 1:
        raise ValueError("order must be at least 1")
    return _ratio_report("M^2 << M", product_lemma_ratios(params.alpha, L), 0, L, params.alpha)


def verify_lemma_comp(params: GevreyParams, L: int) -> list[Report]:
    """Check ``Mtilde**2 << Mtilde`` and ``Mtilde*Mbar << Mbar`` up to order ``L``."""
    if L < 1:
        raise ValueError("order must be at least 1")
    return [
        _ratio_report("Mtilde^2 << Mtilde", tilde_square_ratios(params.alpha, L), 0, L, params.alpha),
        _ratio_report("Mtilde*Mbar << Mbar", tilde_bar_ratios(params.alpha, L), 1, L, params.alpha),
    ]


def verify_tilde_bar_direct(params: GevreyParams, L: int) -> Report:
    """Multiply the two majorant series coefficientwise and compare with ``Mbar``."""
    tilde = majorant(params, L, "Mtilde").log_coeffs
    with np.errstate(divide="ignore"):
        bar = majorant(params, L, "Mbar").log_coeffs
    # convert from X**l/l! coefficients to plain power coefficients
    l = np.arange(L + 1, dtype=float)
    t_pow = tilde - gammaln(l + 1)
    b_pow = bar - gammaln(l + 1)
    worst = 0.0
    worst_l = 1
    for order in range(1, L + 1):
        prod = logsumexp(t_pow[: order + 1][::-1] + b_pow[: order + 1])
        r = math.exp(prod - b_pow[order])
        if r > worst:
            worst, worst_l = r, order
    return Report("Mtilde*Mbar << Mbar (series product)", worst, 1.0, 0.0, {"worst_order": worst_l, "L": L})


# ---------------------------------------------------------------------------
# estimates on concrete series
# ---------------------------------------------------------------------------


def _discarded_norm_budget(mass: float, order: int, params: GevreyParams, n: int) -> float:
    if mass == 0.0:
        return 0.0
    return mass * unit_mode_norm(max(order, 0), params, n)


def compose_near_identity(f: FourierTaylorSeries, u: Sequence[FourierTaylorSeries], K_out: int,
                          N: int | None = None) -> tuple[FourierTaylorSeries, FourierTaylorSeries]:
    """``f(theta + u(theta))`` refit on a grid: the kept part and the visible tail.

    The tail holds every grid mode beyond ``|k|_1 <= K_out``.
    """
    n = f.n
    if len(u) != n:
        raise ValueError("perturbation needs one component per angle")
    N = 4 * K_out + 4 if N is None else N
    if N % 2:
        N += 1
    grid = grid_points(n, N)
    shift = np.stack([coeffs_to_grid(ui.block((0,) * n), n, N) for ui in u])
    pts = (grid + shift).reshape(n, -1).T
    vals = evaluate_at_points(f.block((0,) * n)[None], n, pts)[0].reshape((N,) * n)
    kept, _ = grid_to_coeffs(vals, n, K_out)
    # every grid mode with |k_i| < N/2, embedded in an l1 box large enough to hold its corners
    half = N // 2 - 1
    spectrum = np.fft.fftn(vals) / N**n
    K_full = n * half
    full = np.zeros((2 * K_full + 1,) * n, dtype=complex)
    centre = (slice(K_full - half, K_full + half + 1),) * n
    idx = np.arange(-half, half + 1) % N
    full[centre] = spectrum[np.ix_(*([idx] * n))]
    inner = (slice(K_full - K_out, K_full + K_out + 1),) * n
    full[inner] -= kept
    return FourierTaylorSeries(kept[None]), FourierTaylorSeries(full[None])


def verify_estimates(f: FourierTaylorSeries, g: FourierTaylorSeries, params: GevreyParams, sigma: float,
                     perturbation: Sequence[FourierTaylorSeries] | None = None) -> list[Report]:
    """Evaluate the product, triangle, derivative and composition estimates.

    Parameters
    ----------
    f, g : FourierTaylorSeries
        Angle-only trigonometric polynomials.
    sigma : float
        Width loss, ``0 < sigma < s``.
    perturbation : list of FourierTaylorSeries, optional
        Components of ``u`` in the composition ``f o (Id + u)``; zero by default.

    Returns
    -------
    list of Report
        Product, triangle, one derivative check per angle, and composition
        (flagged ``skipped`` when ``|u|_{s - sigma} > sigma**alpha``).
    """
    if not 0.0 < sigma < params.s:
        raise ValueError("need 0 < sigma < s")
    n = f.n
    reports = []
    nf = norm_trig_poly(f, params)
    ng = norm_trig_poly(g, params)

    prod = multiply(f, g, K_out=f.K + g.K)
    budget = _discarded_norm_budget(prod.truncation_mass, f.K + g.K, params, n)
    reports.append(Report("|f g| <= |f| |g|", norm_trig_poly(prod, params), nf * ng, budget))

    total = add_scale(f, g, 1.0, 1.0)
    reports.append(Report("|f + g| <= |f| + |g|", norm_trig_poly(total, params), nf + ng, 0.0))

    narrow = params.with_width(params.s - sigma)
    for i in range(n):
        d = partial_derivative(f, "theta", i)
        reports.append(Report(f"|d_theta{i} f|_(s-sigma) <= sigma^-alpha |f|_s",
                              norm_trig_poly(d, narrow), sigma ** (-params.alpha) * nf, 0.0))

    zero = FourierTaylorSeries.zeros(n, 0)
    u = list(perturbation) if perturbation is not None else [zero] * n
    nu = norm_trig_poly(u, narrow)
    small_ok = nu <= sigma**params.alpha
    if not small_ok or f.dI > 0:
        reports.append(Report("|f o (Id+u)|_(s-sigma) <= |f|_s", math.nan, nf, 0.0,
                              {"skipped": True, "u_norm": nu, "small_bound": sigma**params.alpha}))
        return reports
    K_u = max(ui.max_mode_order() for ui in u)
    K_out = f.K + 4 * K_u
    kept, tail = compose_near_identity(f, u, K_out)
    # the composed function is only known on a grid, so its norm is the grid norm;
    # the mode-sum bound of the kept part is reported alongside
    lhs = grid_norm(kept, narrow)
    budget = norm_trig_poly(tail, narrow)
    reports.append(Report("|f o (Id+u)|_(s-sigma) <= |f|_s", lhs, nf, budget,
                          {"skipped": False, "u_norm": nu, "small_bound": sigma**params.alpha,
                           "lhs_mode_sum_bound": norm_trig_poly(kept, narrow)}))
    return reports
