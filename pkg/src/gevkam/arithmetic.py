"""Small-divisor profiles of frequency vectors.

``Psi(Q)`` is the largest inverse small divisor ``1/|k.omega|`` over integer
vectors with ``0 < |k|_1 <= Q``.  This module tabulates it (brute force over
l1 shells in any dimension, continued fractions for two frequencies), builds a
continuous envelope with ``Delta(Q) = Q Psi(Q)`` and its inverse, classifies
frequencies by the summability of ``ln Psi(Q) / Q**(1 + 1/alpha)``, and picks
the initial truncation ``Q0`` of the KAM schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, optimize

RESONANCE_TOL = 1e-14
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
VERDICTS = ("holds", "fails", "inconclusive")
METHODS = ("series_Q", "dyadic", "cf", "integral_A")
MAX_CF_GROWTH = 4.0


# ---------------------------------------------------------------------------
# frequencies and brute-force small divisors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmallDivisor:
    """Value of ``Psi`` together with the integer vector realising it."""

    value: float
    k: tuple
    resonant: bool = False

    def __float__(self) -> float:
        return self.value


def liouville_number(terms: int = 6) -> Fraction:
    """Exact partial sum ``sum_{j=1}^{terms} 10**(-j!)``."""
    if terms < 1:
        return Fraction(0)
    top = math.factorial(terms)
    # Horner form: one large power of ten per term instead of a sum of them
    numerator = 1
    for j in range(2, terms + 1):
        numerator = numerator * 10 ** (math.factorial(j) - math.factorial(j - 1)) + 1
    # the numerator ends in the digit 1, so it is coprime to the power of ten
    return Fraction(numerator, 10**top, _normalize=False)


def as_exact(omega) -> tuple | None:
    """Fractions of every component when all are exact rationals or integers."""
    if all(isinstance(x, (int, Fraction)) for x in omega):
        return tuple(Fraction(x) for x in omega)
    return None


def l1_shell(n: int, q: int, half: bool = True) -> np.ndarray:
    """Integer vectors with ``|k|_1 = q``; with ``half`` only one of ``k, -k`` is kept."""
    if n == 1:
        pts = np.array([[q], [-q]]) if q else np.zeros((1, 1), dtype=np.int64)
    else:
        parts = []
        for first in range(-q, q + 1):
            rest = l1_shell(n - 1, q - abs(first), half=False)
            parts.append(np.column_stack([np.full(len(rest), first), rest]))
        pts = np.concatenate(parts).astype(np.int64)
        pts = np.unique(pts, axis=0)
    if half and q > 0:
        # keep vectors whose first nonzero entry is positive
        nz = np.argmax(pts != 0, axis=1)
        pts = pts[pts[np.arange(len(pts)), nz] > 0]
    return pts


def _exact_abs_dot(k, exact) -> Fraction:
    return abs(sum(int(ki) * wi for ki, wi in zip(k, exact)))


def _shell_minimum(omega: np.ndarray, exact, q: int) -> tuple[float, tuple, bool]:
    """Smallest ``|k.omega|`` on the shell ``|k|_1 = q``: value, argmin, resonance flag."""
    pts = l1_shell(len(omega), q)
    vals = np.abs(pts.astype(float) @ omega)
    i = int(np.argmin(vals))
    if exact is None:
        v = float(vals[i])
        return v, tuple(int(x) for x in pts[i]), v < RESONANCE_TOL * q
    # refine the near-minimal candidates exactly so rounding cannot pick the wrong k
    near = np.flatnonzero(vals <= vals[i] * (1 + 1e-6) + 1e-300)
    best = min(((_exact_abs_dot(pts[j], exact), tuple(int(x) for x in pts[j])) for j in near),
               key=lambda t: t[0])
    return float(best[0]), best[1], best[0] == 0


def psi_of(omega, Q: float) -> SmallDivisor:
    """Brute-force ``max 1/|k.omega|`` over ``0 < |k|_1 <= Q``.

    Exact rational components (``int`` or ``Fraction``) are handled in exact
    arithmetic.  A divisor below ``1e-14 |k|`` (or exactly zero) marks the
    result as resonant with an infinite value.
    """
    if Q < 1:
        raise ValueError("Q must be at least 1")
    exact = as_exact(omega)
    w = np.asarray([float(x) for x in omega])
    best_val, best_k = math.inf, None
    for q in range(1, int(math.floor(Q)) + 1):
        v, k, res = _shell_minimum(w, exact, q)
        if res:
            return SmallDivisor(math.inf, k, True)
        if v < best_val:
            best_val, best_k = v, k
    return SmallDivisor(1.0 / best_val, best_k, False)


def psi_table_brute(omega, horizon: int) -> tuple[np.ndarray, bool]:
    """``Psi(Q)`` for ``Q = 1..horizon`` by l1 shells; also a resonance flag."""
    exact = as_exact(omega)
    w = np.asarray([float(x) for x in omega])
    out = np.empty(horizon)
    best = math.inf
    for q in range(1, horizon + 1):
        v, _, res = _shell_minimum(w, exact, q)
        if res:
            out[q - 1:] = math.inf
            return out, True
        best = min(best, v)
        out[q - 1] = 1.0 / best
    return out, False


# ---------------------------------------------------------------------------
# continued fractions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContinuedFraction:
    """Partial quotients and convergents ``p_k / q_k`` for ``k >= 0``."""

    quotients: tuple
    convergents: tuple
    truncated: bool = False


def continued_fraction(nu, count: int) -> ContinuedFraction:
    """Continued fraction of ``nu >= 0`` up to ``count`` quotients.

    ``Fraction`` input is expanded exactly and stops when it terminates
    (flagged ``truncated``).  Float input stops once the remainder is below
    the working precision of the convergent size.
    """
    if nu < 0:
        raise ValueError("expand |nu|")
    exact = isinstance(nu, (Fraction, int))
    x = Fraction(nu) if exact else float(nu)
    quotients, convs = [], []
    p_prev, q_prev, p, q = 0, 1, 1, 0
    truncated = False
    for _ in range(count):
        a = math.floor(x)
        quotients.append(int(a))
        p_prev, q_prev, p, q = p, q, a * p + p_prev, a * q + q_prev
        convs.append((int(p), int(q)))
        frac = x - a
        if frac == 0:
            truncated = True
            break
        if not exact and float(q) ** 2 > 1e15:
            # beyond this size |q nu - p| is below the rounding error of nu
            truncated = True
            break
        x = 1 / frac
    return ContinuedFraction(tuple(quotients), tuple(convs), truncated)


def cf_convergents(nu, count: int) -> tuple[list, bool]:
    """Convergents ``(p_k, q_k)`` for ``k >= 1`` and a flag for a terminated expansion."""
    cf = continued_fraction(abs(nu), count + 1)
    return list(cf.convergents[1:]), cf.truncated


def cf_candidates(nu, max_norm: int) -> list[tuple[int, int]]:
    """Integer vectors ``(-p, q)`` from convergents and intermediate fractions.

    Together with ``(1, 0)`` these contain a minimiser of ``|k_1 + k_2 nu|``
    on every l1 ball, so they determine ``Psi`` for two frequencies.
    """
    nu = abs(nu)
    out = [(1, 0), (0, 1)]
    count = 8
    while True:
        cf = continued_fraction(nu, count)
        if cf.truncated or cf.convergents[-1][1] > max_norm or count > 4096:
            break
        count *= 2
    previous = [(1, 0)] + list(cf.convergents)  # previous[k] = (p_{k-1}, q_{k-1})
    for k, (p, q) in enumerate(cf.convergents):
        if q > max_norm:
            break
        if p + q <= max_norm:
            out.append((-p, q))
        if k + 1 < len(cf.quotients):
            pm, qm = previous[k]
            for j in range(1, cf.quotients[k + 1]):
                ps, qs = pm + j * p, qm + j * q
                if ps + qs > max_norm:
                    break
                out.append((-ps, qs))
    return out


def psi_cf_table(nu, horizon: int) -> tuple[np.ndarray, bool]:
    """``Psi(Q)`` for ``omega = (1, nu)`` and ``Q = 1..horizon`` from continued fractions.

    Each divisor ``|k_1 + k_2 nu|`` is computed exactly as the brute-force
    scan computes it (exactly for rational ``nu``, the same float expression
    otherwise) so the two tables agree bit for bit.
    """
    exact = isinstance(nu, (Fraction, int))
    anu = abs(Fraction(nu)) if exact else abs(float(nu))
    sign = 1 if nu >= 0 else -1
    cands = cf_candidates(anu, horizon)
    best = np.full(horizon + 1, math.inf)
    resonant = False
    for k1, k2 in cands:
        norm = abs(k1) + abs(k2)
        if norm == 0 or norm > horizon:
            continue
        if exact:
            v = float(abs(k1 + k2 * anu))
        else:
            # same arithmetic as the brute force on a sign-adjusted vector
            v = float(abs(float(k1) * 1.0 + float(sign * k2) * float(nu)))
        if v < RESONANCE_TOL * norm:
            resonant = True
        best[norm] = min(best[norm], v)
    running = np.minimum.accumulate(best[1:])
    with np.errstate(divide="ignore"):
        return 1.0 / running, resonant


# ---------------------------------------------------------------------------
# tail models and envelopes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TailModel:
    """Assumed behaviour of ``Psi`` beyond the sampled horizon.

    ``power``: ``Psi = Q**tau / gamma_hat``; ``stretched``: ``Psi = exp(a Q**b)``.
    """

    kind: str
    params: dict
    source: str = "fitted"

    def psi(self, Q):
        Q = np.asarray(Q, dtype=float)
        if self.kind == "power":
            return Q ** self.params["tau"] / self.params["gamma_hat"]
        if self.kind == "stretched":
            return np.exp(self.params["a"] * Q ** self.params["b"])
        raise ValueError(f"unknown tail model {self.kind!r}")

    def log_psi(self, Q):
        """``ln Psi`` under the model, finite where ``Psi`` itself overflows."""
        Q = np.asarray(Q, dtype=float)
        if self.kind == "power":
            return self.params["tau"] * np.log(Q) - math.log(self.params["gamma_hat"])
        if self.kind == "stretched":
            return self.params["a"] * Q ** self.params["b"]
        raise ValueError(f"unknown tail model {self.kind!r}")

    def summable(self, alpha: float) -> bool:
        """Whether ``ln Psi / Q**(1+1/alpha)`` is integrable at infinity under the model."""
        if self.kind == "power":
            return True
        return self.params["b"] < 1.0 / alpha

    def a_integral(self, alpha: float, Q_start: float) -> float:
        """Closed form of ``int_{Q_start}^inf dDelta / (Delta Q**(1/alpha))``."""
        if self.kind == "power":
            return alpha * (self.params["tau"] + 1.0) * Q_start ** (-1.0 / alpha)
        a, b = self.params["a"], self.params["b"]
        if b >= 1.0 / alpha:
            return math.inf
        return alpha * Q_start ** (-1.0 / alpha) + a * b * Q_start ** (b - 1.0 / alpha) / (1.0 / alpha - b)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "source": self.source, **self.params}


def fit_tail(Q: np.ndarray, psi: np.ndarray) -> TailModel:
    """Fit a power law and a stretched exponential to the upper half of a table.

    The model with the smaller least-squares residual (in ``ln Psi``) is
    returned; its constant is raised so the model dominates the fitted data.
    """
    Q = np.asarray(Q, dtype=float)
    psi = np.asarray(psi, dtype=float)
    sel = (Q >= max(Q[-1] / 2, 2.0)) & np.isfinite(psi) & (psi > 1.0)
    if sel.sum() < 3:
        sel = np.isfinite(psi) & (psi > 1.0) & (Q >= 2.0)
    x = np.log(Q[sel])
    y = np.log(psi[sel])
    tau, _ = np.polyfit(x, y, 1)
    tau = max(float(tau), 0.0)
    gamma_hat = float(np.exp(-np.max(y - tau * x)))
    resid_power = float(np.sum((y - (tau * x - math.log(gamma_hat))) ** 2))
    power = TailModel("power", {"tau": tau, "gamma_hat": gamma_hat})
    ly = np.log(y)
    b, _ = np.polyfit(x, ly, 1)
    b = max(float(b), 1e-12)
    a = float(np.exp(np.max(ly - b * x)))
    resid_stretched = float(np.sum((y - a * np.exp(b * x)) ** 2))
    if resid_stretched < 0.5 * resid_power:
        return TailModel("stretched", {"a": a, "b": b})
    return power


@dataclass
class FrequencyProfile:
    """Tabulated ``Psi`` of a frequency vector or an analytic model profile.

    Attributes
    ----------
    omega : tuple or None
        Frequency vector normalised to ``(1, ...)`` with entries in ``[-1, 1]``
        (``None`` for a synthetic model profile).
    Q, psi : ndarray
        Sampled pairs ``(Q, Psi_omega(Q))`` for ``Q = 1..horizon``.
    resonant : bool
    tail : TailModel or None
        Behaviour assumed beyond the horizon.
    model : callable or None
        Exact ``Psi`` of a synthetic profile (overrides the table).
    """

    omega: tuple | None
    Q: np.ndarray
    psi: np.ndarray
    resonant: bool = False
    tail: TailModel | None = None
    model: Callable | None = None
    label: str = ""
    method: str = "brute"
    scale: float = 1.0

    @property
    def horizon(self) -> int:
        return int(self.Q[-1]) if len(self.Q) else 0

    @property
    def n(self) -> int:
        return len(self.omega) if self.omega is not None else 2

    def psi_step(self, Q) -> np.ndarray:
        """``Psi_omega`` itself: piecewise constant on ``[Q, Q+1)``."""
        Q = np.asarray(Q, dtype=float)
        if self.model is not None:
            # a model profile is its own continuous function; sample at floor(Q)
            return np.asarray(self.model(np.floor(Q)), dtype=float)
        idx = np.floor(Q).astype(int) - 1
        if np.any(idx >= len(self.psi)):
            raise ValueError("Q beyond the sampled horizon")
        return self.psi[idx]

    def to_csv(self) -> str:
        lines = ["Q,psi"] + [f"{int(q)},{p!r}" for q, p in zip(self.Q, self.psi)]
        return "\n".join(lines) + "\n"


def normalize_frequency(omega) -> tuple[tuple, float]:
    """Divide by the largest component so that ``omega = (1, ...)`` after reordering.

    Returns the normalised vector and the factor (``Psi`` scales by its inverse).
    """
    vals = [abs(float(x)) for x in omega]
    i = int(np.argmax(vals))
    lead = omega[i]
    if lead == 0:
        raise ValueError("zero frequency vector")
    rest = [x for j, x in enumerate(omega) if j != i]
    exact = as_exact(omega)
    if exact is not None:
        lead_e = exact[i]
        normalized = (Fraction(1),) + tuple(Fraction(x) / lead_e for x in rest)
    else:
        normalized = (1.0,) + tuple(float(x) / float(lead) for x in rest)
    return normalized, abs(float(lead))


def build_profile(omega, horizon: int, label: str = "", tail: TailModel | None | str = "fit") -> FrequencyProfile:
    """Tabulate ``Psi`` of ``omega`` up to ``horizon``.

    Two frequencies use continued fractions; other dimensions scan l1 shells.
    ``tail='fit'`` fits a tail model to the table; ``None`` records none.
    """
    normalized, scale = normalize_frequency(omega)
    Q = np.arange(1, horizon + 1)
    if len(normalized) == 2:
        psi, resonant = psi_cf_table(normalized[1], horizon)
        method = "continued_fraction"
    else:
        psi, resonant = psi_table_brute(normalized, horizon)
        method = "brute"
    if resonant:
        tail_model = None
    elif tail == "fit":
        tail_model = fit_tail(Q, psi)
    else:
        tail_model = tail
    return FrequencyProfile(normalized, Q, psi, resonant, tail_model, None, label, method, scale)


def power_law_profile(tau: float, gamma_hat: float = 1.0, horizon: int = 10**6, n: int = 2) -> FrequencyProfile:
    """Synthetic Diophantine profile ``Psi(Q) = Q**tau / gamma_hat``."""
    model = TailModel("power", {"tau": float(tau), "gamma_hat": float(gamma_hat)}, source="model")
    Q = np.arange(1, min(horizon, 10**4) + 1)
    return FrequencyProfile(None, Q, model.psi(Q), False, model, model.psi, f"power(tau={tau})", "model")


def stretched_exponential_profile(b: float, a: float = 1.0, horizon: int = 10**4) -> FrequencyProfile:
    """Synthetic profile ``Psi(Q) = exp(a Q**b)``."""
    model = TailModel("stretched", {"a": float(a), "b": float(b)}, source="model")
    Q = np.arange(1, horizon + 1)
    return FrequencyProfile(None, Q, model.psi(Q), False, model, model.psi, f"stretched(b={b})", "model")


class Envelope:
    """Continuous non-decreasing ``Psi`` with ``Delta(Q) = Q Psi(Q)`` and its inverse.

    Between integer samples ``Psi`` is linear through ``(Q, Psi_omega(Q))``;
    beyond the horizon the tail model is used (raised to stay continuous and
    non-decreasing).
    """

    def __init__(self, profile: FrequencyProfile):
        if profile.resonant:
            raise ValueError("resonant frequency: no envelope")
        self.profile = profile
        self.model = profile.model
        self.tail = profile.tail
        self.Q = profile.Q.astype(float)
        self.values = profile.psi.astype(float)
        self.horizon = float(self.Q[-1])
        self.tail_integrals: dict = {}

    def psi(self, Q):
        Q = np.asarray(Q, dtype=float)
        if np.any(Q < 1.0):
            raise ValueError("Psi is defined on [1, inf)")
        if self.model is not None:
            return np.asarray(self.model(Q), dtype=float)
        out = np.interp(Q, self.Q, self.values)
        beyond = Q > self.horizon
        if np.any(beyond):
            if self.tail is None:
                raise ValueError("Q beyond the horizon and no tail model recorded")
            out = np.where(beyond, np.maximum(self.tail.psi(np.where(beyond, Q, self.horizon)),
                                              self.values[-1]), out)
        return out

    def delta(self, Q):
        return np.asarray(Q, dtype=float) * self.psi(Q)

    def psi_scalar(self, q: float) -> float:
        """Scalar ``Psi`` without array overhead (used inside root finding)."""
        if self.model is not None:
            return float(self.model(q))
        if q <= self.horizon:
            j = int(q)
            if j >= self.horizon:
                return float(self.values[-1])
            t = q - j
            return float(self.values[j - 1] * (1.0 - t) + self.values[j] * t)
        if self.tail is None:
            raise ValueError("Q beyond the horizon and no tail model recorded")
        return max(float(self.tail.psi(q)), float(self.values[-1]))

    def delta_inv(self, x: float, rtol: float = 1e-12) -> float:
        """Solve ``Delta(Q) = x`` by bisection to relative accuracy ``rtol`` (or better)."""
        f = lambda q: q * self.psi_scalar(q) - x
        lo = 1.0
        d_lo = f(lo) + x
        if x < d_lo * (1 - 1e-15):
            raise ValueError(f"{x} is below Delta(1) = {d_lo}")
        if x <= d_lo:
            return 1.0
        hi = 2.0
        while f(hi) < 0:
            lo, hi = hi, hi * 2.0
            if hi > 1e300:
                raise ValueError("Delta inverse out of range")
        return optimize.bisect(f, lo, hi, xtol=1e-300, rtol=max(min(rtol, 1e-15), 4.5e-16), maxiter=2000)


def psi_envelope(profile: FrequencyProfile) -> Envelope:
    return Envelope(profile)


# ---------------------------------------------------------------------------
# the (A_alpha) integral and Q0
# ---------------------------------------------------------------------------

_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(12)


def _segment_integral(env: Envelope, alpha: float, Q_lo: float, Q_hi: float) -> float:
    """``int dDelta/(Delta Q**(1/alpha))`` over a table range, segment by segment."""
    if Q_hi <= Q_lo:
        return 0.0
    knots = np.concatenate([[Q_lo], env.Q[(env.Q > Q_lo) & (env.Q < Q_hi)], [Q_hi]])
    a, b = knots[:-1], knots[1:]
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    x = mid[:, None] + half[:, None] * _GAUSS_X[None, :]
    psi = env.psi(x)
    # slope of the linear piece through the integer samples
    j = np.clip(np.floor(mid).astype(int) - 1, 0, len(env.values) - 2)
    slope = (env.values[j + 1] - env.values[j])[:, None]
    dlog_delta = (psi + x * slope) / (x * psi)
    vals = dlog_delta * x ** (-1.0 / alpha)
    return float(np.sum(half * (vals @ _GAUSS_W)))


def _numeric_x_integral(env: Envelope, alpha: float, x_start: float) -> float:
    """``int_{x_start}^inf dx / (x Delta^-1(x)**(1/alpha))`` by quadrature with ``x = x_start e**u``.

    Past ``x = 1e300`` the remainder is the closed form of the tail model.
    """
    def integrand(u):
        return env.delta_inv(x_start * math.exp(u)) ** (-1.0 / alpha)

    u_cap = math.log(1e300 / x_start)
    total, pieces = 0.0, 0
    lo = 0.0
    width = 8.0
    while lo < u_cap:
        hi = min(lo + width, u_cap)
        part, _ = integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=1e-12, limit=200)
        total += part
        pieces += 1
        lo = hi
        if part <= 1e-15 * total or pieces > 400:
            return total
        width *= 1.5
    if env.tail is None:
        raise ValueError("integral reaches 1e300 and no tail model is recorded")
    return total + env.tail.a_integral(alpha, env.delta_inv(1e300))


@dataclass(frozen=True)
class IntegralValue:
    """Value of the (A_alpha)-type integral split into sampled and modelled parts."""

    value: float
    table_part: float
    tail_part: float
    tail_model: dict | None
    closed_form_tail: float | None = None


def a_integral(profile: FrequencyProfile, alpha: float, Q_start: float = 1.0, env: Envelope | None = None) -> IntegralValue:
    """``int_{Delta(Q_start)}^inf dx / (x Delta^-1(x)**(1/alpha))``.

    The sampled range is integrated in the variable ``Q`` (the substitution
    ``x = Delta(Q)``); the range beyond the horizon, or the whole range for a
    model profile, is integrated numerically in ``x`` with ``Delta^-1`` found
    by bisection.
    """
    env = Envelope(profile) if env is None else env
    if profile.model is not None:
        tail = _numeric_x_integral(env, alpha, float(env.delta(Q_start)))
        closed = profile.tail.a_integral(alpha, Q_start) if profile.tail else None
        return IntegralValue(tail, 0.0, tail, profile.tail.to_dict() if profile.tail else None, closed)
    if profile.tail is None:
        raise ValueError("integral beyond the horizon needs a tail model")
    H = env.horizon
    table = _segment_integral(env, alpha, Q_start, H) if Q_start < H else 0.0
    start = max(Q_start, H)
    if not profile.tail.summable(alpha):
        return IntegralValue(math.inf, table, math.inf, profile.tail.to_dict(), math.inf)
    key = (alpha, start)
    if key not in env.tail_integrals:
        env.tail_integrals[key] = _numeric_x_integral(env, alpha, float(env.delta(start)))
    tail = env.tail_integrals[key]
    # a jump of the model above the last sample is a Stieltjes point mass
    jump_ratio = float(env.delta(start) / (start * profile.psi_step(min(start, H))))
    jump = max(math.log(jump_ratio), 0.0) * start ** (-1.0 / alpha) if start == H else 0.0
    return IntegralValue(table + jump + tail, table + jump, tail, profile.tail.to_dict(),
                         profile.tail.a_integral(alpha, start))


class Q0Unsatisfiable(ValueError):
    """No admissible ``Q0`` within range; carries the best bound achieved."""

    def __init__(self, message: str, achieved: float, target: float):
        super().__init__(message)
        self.achieved = achieved
        self.target = target


@dataclass(frozen=True)
class Q0Choice:
    Q0: int
    lhs: float
    rhs: float
    power_part: float
    integral_part: float
    tail_model: dict | None

    def __int__(self) -> int:
        return self.Q0


def q0_condition_lhs(profile: FrequencyProfile, alpha: float, Q0: float, env: Envelope | None = None) -> tuple[float, float]:
    """``Q0**(-1/alpha)`` and ``(ln 2)**-1`` times the integral from ``Delta(Q0)``."""
    integral = a_integral(profile, alpha, Q0, env).value
    return Q0 ** (-1.0 / alpha), integral / math.log(2.0)


def select_Q0(profile: FrequencyProfile, alpha: float, s: float, eta: float = 0.0, C: float = 1.0,
              max_Q0: int | None = None) -> Q0Choice:
    """Smallest integer ``Q0 >= n + 2`` with

        Q0**(-1/alpha) + (ln 2)**-1 int_{Delta(Q0)}^inf dx / (x Delta^-1(x)**(1/alpha))
            <= (1 + eta)**(-1/alpha) s / (2 C).

    The search is limited to the sampled horizon (or ``max_Q0``).
    """
    env = Envelope(profile)
    rhs = (1.0 + eta) ** (-1.0 / alpha) * s / (2.0 * C)
    lo = profile.n + 2
    hi = int(max_Q0 if max_Q0 is not None else max(profile.horizon, lo))

    def lhs(q):
        a, b = q0_condition_lhs(profile, alpha, q, env)
        return a + b, a, b

    total_lo, a_lo, b_lo = lhs(lo)
    if total_lo <= rhs:
        return Q0Choice(lo, total_lo, rhs, a_lo, b_lo, profile.tail.to_dict() if profile.tail else None)
    total_hi, _, _ = lhs(hi)
    if total_hi > rhs:
        raise Q0Unsatisfiable(f"condition needs {total_hi:.6g} <= {rhs:.6g} at Q0={hi}", total_hi, rhs)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if lhs(mid)[0] <= rhs:
            hi = mid
        else:
            lo = mid
    total, a, b = lhs(hi)
    return Q0Choice(hi, total, rhs, a, b, profile.tail.to_dict() if profile.tail else None)


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


@dataclass
class CriterionResult:
    verdict: str
    method: str
    partial_sum: float
    tail_bound: float | None
    tail_model: dict | None
    trajectory: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "method": self.method, "partial_sum": self.partial_sum,
                "tail_bound": self.tail_bound, "tail_model": self.tail_model, "trajectory": self.trajectory}


@dataclass
class ArithReport:
    alpha: float
    br_alpha: CriterionResult
    a_alpha: CriterionResult
    b_alpha: float
    tau: float | None
    resonant: bool = False

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "resonant": self.resonant, "br_alpha": self.br_alpha.to_dict(),
                "a_alpha": self.a_alpha.to_dict(), "b_alpha_estimate": self.b_alpha, "tau_fit": self.tau}


def _trajectory(values: np.ndarray, points: int = 12) -> list:
    idx = np.unique(np.geomspace(1, len(values), num=min(points, len(values))).astype(int) - 1)
    return [[int(i + 1), float(values[i])] for i in idx]


def _model_series_tail(model: TailModel, alpha: float, H: int, dyadic: bool) -> float:
    """Sum of the series terms beyond the horizon under the tail model."""
    beta = 1.0 + 1.0 / alpha
    if not model.summable(alpha):
        return math.inf
    if dyadic:
        l0 = int(math.floor(math.log2(H))) + 1
        l = np.arange(l0, l0 + 4000, dtype=float)
        log_q = l * math.log(2.0)
        log_psi = np.maximum(model.log_psi(np.exp(np.minimum(log_q, 700.0))), 0.0)
        # beyond 2**1000 the power-law terms are below 1e-150 of the first term
        terms = np.where(log_q <= 700.0, log_psi * np.exp(-log_q / alpha), 0.0)
        return float(np.sum(terms))
    f = lambda q: math.log(max(float(model.psi(q)), 1.0)) * q ** (-beta)
    # terms decrease eventually; bound the sum by the integral from H plus the first term
    val, _ = integrate.quad(f, H, np.inf, limit=400)
    return f(H + 1) + val


def _series_criterion(profile: FrequencyProfile, alpha: float, dyadic: bool, H: int | None = None) -> CriterionResult:
    beta = 1.0 + 1.0 / alpha
    H = profile.horizon if H is None else H
    if dyadic:
        l = np.arange(0, int(math.floor(math.log2(H))) + 1)
        terms = np.log(profile.psi_step(2.0**l)) / 2.0 ** (l / alpha)
        name = "dyadic"
    else:
        Q = np.arange(1, H + 1, dtype=float)
        terms = np.log(profile.psi_step(Q)) / Q**beta
        name = "series_Q"
    partial = np.cumsum(terms)
    model = profile.tail
    if model is None:
        return CriterionResult("inconclusive", name, float(partial[-1]), None, None, _trajectory(partial))
    tail = _model_series_tail(model, alpha, H, dyadic)
    verdict = "holds" if math.isfinite(tail) else "fails"
    return CriterionResult(verdict, name, float(partial[-1]), tail, model.to_dict(), _trajectory(partial))


def _log_int(x: int) -> float:
    return math.log(x) if x < 2**1000 else math.log(x >> (x.bit_length() - 64)) + (x.bit_length() - 64) * math.log(2.0)


def _cf_criterion(profile: FrequencyProfile, alpha: float, nu=None, count: int = 60) -> CriterionResult:
    """Partial sums of ``ln q_{k+1} / q_k**(1/alpha)`` with a growth-model tail.

    The tail model ``ln q_{k+1} <= lam (ln q_k)**p`` is fitted to the sampled
    denominators; together with ``q_{k+2} >= 2 q_k`` it bounds the remaining
    terms by a convergent series.  Fitted exponents above ``MAX_CF_GROWTH``
    are treated as out of model.
    """
    if profile.n != 2 or profile.omega is None:
        raise ValueError("continued fraction criterion is only available for two frequencies")
    nu = profile.omega[1] if nu is None else nu
    convs, truncated = cf_convergents(abs(nu), count)
    q = [c[1] for c in convs if c[1] >= 1]
    if len(q) < 4:
        return CriterionResult("inconclusive", "cf", math.nan, None, None, [])
    logs = np.array([_log_int(x) for x in q])
    terms = logs[1:] * np.exp(-logs[:-1] / alpha)
    partial = np.cumsum(terms)
    x, y = logs[:-1], logs[1:]
    sel = x > 0.5
    if sel.sum() >= 2:
        p = max(1.0, float(np.polyfit(np.log(x[sel]), np.log(y[sel]), 1)[0]))
        lam = float(np.max(y[sel] / x[sel] ** p))
    else:
        p, lam = 1.0, float(np.max(y / np.maximum(x, 1.0)))
    model = {"kind": "log_growth", "lam": lam, "p": p, "source": "fitted to sampled denominators",
             "expansion_terminated": bool(truncated)}
    if p > MAX_CF_GROWTH:
        return CriterionResult("inconclusive", "cf", float(partial[-1]), None, model, _trajectory(partial))
    # q_{K+j} >= q_K 2**floor(j/2); sum the model terms for the next 4000 indices
    j = np.arange(1, 4001, dtype=float)
    log_qk = logs[-1] + np.floor(j / 2) * math.log(2.0)
    # L**p exp(-L/alpha) decreases for L >= p alpha, so a lower bound on q_k bounds the term
    L = np.maximum(log_qk, p * alpha)
    tail = float(np.sum(lam * L**p * np.exp(-L / alpha)))
    return CriterionResult("holds", "cf", float(partial[-1]), tail, model, _trajectory(partial))


def _integral_criterion(profile: FrequencyProfile, alpha: float) -> CriterionResult:
    if profile.tail is None:
        env = Envelope(profile)
        part = _segment_integral(env, alpha, 1.0, env.horizon)
        return CriterionResult("inconclusive", "integral_A", part, None, None, [])
    val = a_integral(profile, alpha, 1.0)
    verdict = "holds" if math.isfinite(val.value) else "fails"
    return CriterionResult(verdict, "integral_A", val.table_part, val.tail_part, val.tail_model, [])


def b_alpha_estimate(profile: FrequencyProfile, alpha: float) -> float:
    """Horizon estimate of ``limsup ln Psi(Q) / Q**(1/alpha)`` over the upper half of the table."""
    Q = profile.Q.astype(float)
    sel = Q >= Q[-1] / 2
    return float(np.max(np.log(profile.psi_step(Q[sel])) / Q[sel] ** (1.0 / alpha)))


def tau_estimate(profile: FrequencyProfile) -> float | None:
    """Least-squares exponent of ``Psi ~ Q**tau`` on the upper half of the table."""
    Q = profile.Q.astype(float)
    sel = (Q >= max(Q[-1] / 2, 2.0)) & np.isfinite(profile.psi)
    if sel.sum() < 3:
        return None
    return float(np.polyfit(np.log(Q[sel]), np.log(profile.psi_step(Q[sel])), 1)[0])


def classify(profile: FrequencyProfile, alpha: float, method: str = "series_Q") -> ArithReport:
    """Three-valued verdict on summability of ``ln Psi(Q) / Q**(1+1/alpha)``.

    A verdict other than ``inconclusive`` is only issued under the recorded
    tail model (or, for ``cf``, a geometric model of the last terms).
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if profile.resonant:
        none = CriterionResult("fails", method, math.inf, None, None, [])
        return ArithReport(alpha, none, none, math.inf, None, True)
    if method == "cf":
        br = _cf_criterion(profile, alpha)
    elif method == "integral_A":
        br = None
    else:
        br = _series_criterion(profile, alpha, dyadic=(method == "dyadic"))
    a = _integral_criterion(profile, alpha)
    if br is None:
        br = a
    return ArithReport(alpha, br, a, b_alpha_estimate(profile, alpha), tau_estimate(profile))


def comparison_sums(profile: FrequencyProfile, alpha: float, horizon: int) -> dict:
    """Partial sums behind the equivalence of the series and dyadic criteria.

    For every horizon ``H <= horizon``:

    * ``f2[H] = sum_{Q<=H} ln Psi(Q) / Q**beta``,
    * ``f3_lower[H]``: dyadic terms whose block ``[2**l, 2**(l+1) - 1]`` lies within ``H``,
    * ``f3_upper[H]``: dyadic terms for ``l <= floor(log2 H) + 1``.

    Returns the arrays and the two bound checks
    ``(alpha/2) f3_lower <= f2 <= 2**(1/alpha) (1+alpha) f3_upper``.
    """
    beta = 1.0 + 1.0 / alpha
    Q = np.arange(1, horizon + 1, dtype=float)
    f2 = np.cumsum(np.log(profile.psi_step(Q)) / Q**beta)
    lmax = int(math.floor(math.log2(horizon))) + 1
    l = np.arange(0, lmax + 1)
    dy = np.log(profile.psi_step(2.0**l)) / 2.0 ** (l / alpha)
    cum = np.cumsum(dy)
    H = Q.astype(int)
    # lower: largest l with 2**(l+1) - 1 <= H
    l_low = np.floor(np.log2(H + 1)).astype(int) - 1
    f3_lower = np.where(l_low >= 0, cum[np.clip(l_low, 0, lmax)], 0.0)
    l_up = np.floor(np.log2(H)).astype(int) + 1
    f3_upper = cum[l_up]
    lower_ok = 0.5 * alpha * f3_lower <= f2 * (1 + 1e-12)
    upper_ok = f2 <= 2 ** (1 / alpha) * (1 + alpha) * f3_upper * (1 + 1e-12)
    return {"f2": f2, "f3_lower": f3_lower, "f3_upper": f3_upper,
            "lower_ok": lower_ok, "upper_ok": upper_ok}
