"""Truncated Fourier-Taylor series on the unit torus times an action ball.

A series is stored as a dense block of complex Fourier coefficients for each
action monomial ``I**m`` with ``|m| <= dI``::

    f(theta, I) = sum_m sum_k c[m, k] exp(2 pi i k.theta) I**m

Coefficients are kept Hermitian (``c[m, -k] = conj(c[m, k])``) so the series
is real valued; the public term view reports cosine/sine amplitudes.
Only modes with ``|k|_1 <= K`` are retained.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import convolve

TWO_PI = 2.0 * np.pi
MAX_ACTION_DEGREE = 2


# ---------------------------------------------------------------------------
# multi-indices and mode boxes
# ---------------------------------------------------------------------------


def multi_index_order(k: Sequence[int]) -> int:
    """Return ``|k| = sum |k_i|``."""
    return int(sum(abs(int(x)) for x in k))


@lru_cache(maxsize=None)
def action_monomials(n: int, degree: int) -> tuple[tuple[int, ...], ...]:
    """Action multi-indices ``m`` with ``|m| <= degree``, ordered by degree."""
    if n < 1:
        raise ValueError("dimension must be at least 1")
    out = []
    for d in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(n), d):
            m = [0] * n
            for i in combo:
                m[i] += 1
            out.append(tuple(m))
    return tuple(out)


@lru_cache(maxsize=None)
def _monomial_index(n: int, degree: int) -> dict:
    return {m: i for i, m in enumerate(action_monomials(n, degree))}


def degree_from_count(n: int, count: int) -> int:
    for d in range(MAX_ACTION_DEGREE + 1):
        if len(action_monomials(n, d)) == count:
            return d
    raise ValueError(f"{count} action blocks do not match any degree for n={n}")


@lru_cache(maxsize=None)
def mode_axes(K: int) -> np.ndarray:
    return np.arange(-K, K + 1)


@lru_cache(maxsize=None)
def mode_vectors(n: int, K: int) -> np.ndarray:
    """Integer modes of the box, shape ``(n, 2K+1, ..., 2K+1)``."""
    axes = [mode_axes(K)] * n
    grids = np.meshgrid(*axes, indexing="ij")
    out = np.stack(grids)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def mode_orders(n: int, K: int) -> np.ndarray:
    out = np.abs(mode_vectors(n, K)).sum(axis=0)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def l1_mask(n: int, K: int) -> np.ndarray:
    """Boolean mask of the modes with ``|k|_1 <= K`` inside the box."""
    out = mode_orders(n, K) <= K
    out.setflags(write=False)
    return out


def _flip_modes(c: np.ndarray, n: int) -> np.ndarray:
    """Return the array indexed by ``-k`` on the last ``n`` axes."""
    return c[(Ellipsis,) + (slice(None, None, -1),) * n]


def hermitian_part(c: np.ndarray, n: int) -> np.ndarray:
    return 0.5 * (c + np.conj(_flip_modes(c, n)))


def resize_box(c: np.ndarray, n: int, K_old: int, K_new: int) -> np.ndarray:
    """Embed or cut a coefficient box from order ``K_old`` to ``K_new``."""
    if K_new == K_old:
        return c
    lead = c.shape[: c.ndim - n]
    if K_new > K_old:
        out = np.zeros(lead + (2 * K_new + 1,) * n, dtype=complex)
        pad = K_new - K_old
        out[(Ellipsis,) + (slice(pad, pad + 2 * K_old + 1),) * n] = c
        return out
    cut = K_old - K_new
    out = c[(Ellipsis,) + (slice(cut, cut + 2 * K_new + 1),) * n].copy()
    return out


# ---------------------------------------------------------------------------
# grid transforms
# ---------------------------------------------------------------------------


def grid_points(n: int, N: int) -> np.ndarray:
    """Regular angle grid ``theta_j = j/N``, shape ``(n, N, ..., N)``."""
    axes = [np.arange(N) / N] * n
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def _fft_index(K: int, N: int, n: int):
    idx = np.arange(-K, K + 1) % N
    return (Ellipsis,) + np.ix_(*([idx] * n))


def coeffs_to_grid(c: np.ndarray, n: int, N: int) -> np.ndarray:
    """Real values on the ``N**n`` grid of coefficient boxes (leading axes kept)."""
    K = (c.shape[-1] - 1) // 2
    if N < 2 * K + 1:
        raise ValueError(f"grid of {N} points cannot hold modes up to {K}")
    lead = c.shape[: c.ndim - n]
    full = np.zeros(lead + (N,) * n, dtype=complex)
    full[_fft_index(K, N, n)] = c
    axes = tuple(range(c.ndim - n, c.ndim))
    return np.real(np.fft.ifftn(full, axes=axes)) * N**n


def grid_to_coeffs(values: np.ndarray, n: int, K: int) -> tuple[np.ndarray, float]:
    """Discrete Fourier coefficients with ``|k|_1 <= K`` and the discarded l1 mass."""
    N = values.shape[-1]
    axes = tuple(range(values.ndim - n, values.ndim))
    full = np.fft.fftn(values, axes=axes) / N**n
    total = float(np.abs(full).sum())
    box = full[_fft_index(K, N, n)]
    box = np.where(l1_mask(n, K), box, 0.0)
    kept = float(np.abs(box).sum())
    return box, max(total - kept, 0.0)


def derivative_factors(n: int, K: int, orders: Sequence[int], torus_period: float = 1.0) -> np.ndarray:
    """Multiplier ``prod_d (i w k_d)**orders[d]`` with ``w = 2 pi / period``."""
    w = TWO_PI / torus_period
    k = mode_vectors(n, K)
    out = np.ones(k.shape[1:], dtype=complex)
    for d, o in enumerate(orders):
        if o:
            out = out * (1j * w * k[d]) ** o
    return out


def evaluate_at_points(c: np.ndarray, n: int, points: np.ndarray) -> np.ndarray:
    """Evaluate coefficient boxes at arbitrary angle points.

    ``c`` has shape ``(..., 2K+1, ..., 2K+1)``; ``points`` has shape ``(P, n)``.
    Returns real values of shape ``(..., P)``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    K = (c.shape[-1] - 1) // 2
    k = mode_axes(K)
    table = np.exp(1j * TWO_PI * points[:, :, None] * k[None, None, :])  # (P, n, 2K+1)
    out = c @ table[:, n - 1, :].T  # contract the last mode axis
    for d in range(n - 2, -1, -1):
        # out has shape (..., b_0..b_d, P)
        out = np.einsum("...bp,pb->...p", out, table[:, d, :])
    return np.real(out)


def shifted_grid_values(
    c: np.ndarray,
    n: int,
    shift: np.ndarray,
    rel_tol: float = 1e-17,
    max_taylor_order: int = 14,
) -> np.ndarray:
    """Values of ``f(theta_g + shift_g)`` on the regular grid carrying ``shift``.

    For small shifts a Taylor expansion built from spectral derivatives is
    used, with the truncation error bounded by
    ``sum|c| (2 pi |k| |shift|)**(p+1) / (p+1)!``; otherwise the series is
    summed directly at every shifted point.
    """
    N = shift.shape[-1]
    K = (c.shape[-1] - 1) // 2
    active = np.abs(c).reshape(-1, *c.shape[-n:]).sum(axis=0) > 0
    if not active.any():
        return np.zeros(c.shape[: c.ndim - n] + (N,) * n)
    kmax = int(mode_orders(n, K)[active].max())
    emax = float(np.abs(shift).max())
    x = TWO_PI * kmax * emax
    if x == 0.0:
        return coeffs_to_grid(c, n, N)
    order = None
    term = x
    for p in range(max_taylor_order + 1):
        # term = x**(p+1)/(p+1)!
        if term <= rel_tol:
            order = p
            break
        term = term * x / (p + 2)
    if order is None:
        pts = (grid_points(n, N) + shift).reshape(n, -1).T
        vals = evaluate_at_points(c, n, pts)
        return vals.reshape(c.shape[: c.ndim - n] + (N,) * n)
    out = np.zeros(c.shape[: c.ndim - n] + (N,) * n)
    for total in range(order + 1):
        for combo in itertools.combinations_with_replacement(range(n), total):
            j = [0] * n
            for i in combo:
                j[i] += 1
            deriv = coeffs_to_grid(c * derivative_factors(n, K, j), n, N)
            weight = np.ones((N,) * n)
            for d in range(n):
                if j[d]:
                    weight = weight * shift[d] ** j[d] / math.factorial(j[d])
            out += deriv * weight
    return out


# ---------------------------------------------------------------------------
# the series type
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TorusPoint:
    """A point of the unit torus times action space; angles reduced mod 1."""

    theta: tuple
    I: tuple = ()

    def __post_init__(self):
        theta = tuple(float(t) % 1.0 for t in self.theta)
        if len(theta) < 1:
            raise ValueError("a torus point needs at least one angle")
        actions = tuple(float(a) for a in self.I) if len(self.I) else (0.0,) * len(theta)
        if len(actions) != len(theta):
            raise ValueError("angle and action dimensions differ")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "I", actions)


class FourierTaylorSeries:
    """Immutable truncated Fourier-Taylor series.

    Parameters
    ----------
    coeffs : array_like
        Complex coefficients of shape ``(n_blocks, 2K+1, ..., 2K+1)`` where
        ``n_blocks`` is the number of action monomials of degree ``<= dI``.
    truncation_mass : float
        l1 mass of coefficients discarded when this series was produced.
    metadata : dict, optional
        Free-form record of the truncation policy that produced the series.
    """

    __slots__ = ("_coeffs", "n", "K", "dI", "truncation_mass", "metadata")

    def __init__(self, coeffs, truncation_mass: float = 0.0, metadata: dict | None = None):
        c = np.array(coeffs, dtype=complex)
        if c.ndim < 2:
            raise ValueError("coefficients need an action axis and at least one mode axis")
        n = c.ndim - 1
        side = c.shape[1]
        if side % 2 != 1 or any(s != side for s in c.shape[1:]):
            raise ValueError("mode axes must all have odd length 2K+1")
        K = (side - 1) // 2
        dI = degree_from_count(n, c.shape[0])
        c = hermitian_part(c, n)
        c = np.where(l1_mask(n, K), c, 0.0)
        c.setflags(write=False)
        self._coeffs = c
        self.n = n
        self.K = K
        self.dI = dI
        self.truncation_mass = float(truncation_mass)
        self.metadata = dict(metadata or {})

    # -- construction -------------------------------------------------------

    @classmethod
    def zeros(cls, n: int, K: int, dI: int = 0) -> "FourierTaylorSeries":
        return cls(np.zeros((len(action_monomials(n, dI)),) + (2 * K + 1,) * n, dtype=complex))

    @classmethod
    def constant(cls, value: float, n: int, K: int = 0) -> "FourierTaylorSeries":
        c = np.zeros((1,) + (2 * K + 1,) * n, dtype=complex)
        c[(0,) + (K,) * n] = value
        return cls(c)

    @classmethod
    def from_terms(cls, n: int, K: int, dI: int, terms: Iterable) -> "FourierTaylorSeries":
        """Build from ``(k, m, cos_amplitude, sin_amplitude)`` records.

        Each record adds ``(a cos(2 pi k.theta) + b sin(2 pi k.theta)) I**m``.
        """
        c = np.zeros((len(action_monomials(n, dI)),) + (2 * K + 1,) * n, dtype=complex)
        index = _monomial_index(n, dI)
        for k, m, a, b in terms:
            k = tuple(int(x) for x in k)
            m = tuple(int(x) for x in m) if m is not None else (0,) * n
            if len(k) != n or len(m) != n:
                raise ValueError("term dimension mismatch")
            if multi_index_order(k) > K:
                raise ValueError(f"mode {k} exceeds truncation order {K}")
            if m not in index:
                raise ValueError(f"action index {m} exceeds degree {dI}")
            pos = tuple(x + K for x in k)
            neg = tuple(-x + K for x in k)
            block = index[m]
            if all(x == 0 for x in k):
                c[(block,) + pos] += a
            else:
                c[(block,) + pos] += 0.5 * (a - 1j * b)
                c[(block,) + neg] += 0.5 * (a + 1j * b)
        return cls(c)

    @classmethod
    def trig(cls, k: Sequence[int], cos: float = 0.0, sin: float = 0.0, K: int | None = None,
             m: Sequence[int] | None = None) -> "FourierTaylorSeries":
        """Single-mode series ``(cos*cos(2 pi k.theta) + sin*sin(2 pi k.theta)) I**m``."""
        n = len(k)
        K = multi_index_order(k) if K is None else K
        dI = 0 if m is None else int(sum(m))
        return cls.from_terms(n, K, dI, [(k, m, cos, sin)])

    # -- views --------------------------------------------------------------

    @property
    def coeffs(self) -> np.ndarray:
        return self._coeffs

    @property
    def monomials(self) -> tuple:
        return action_monomials(self.n, self.dI)

    def block(self, m: Sequence[int]) -> np.ndarray:
        """Coefficient box of the action monomial ``I**m`` (zeros if absent)."""
        m = tuple(int(x) for x in m)
        index = _monomial_index(self.n, self.dI)
        if m not in index:
            return np.zeros((2 * self.K + 1,) * self.n, dtype=complex)
        return self._coeffs[index[m]]

    def mode(self, k: Sequence[int], m: Sequence[int] | None = None) -> complex:
        m = (0,) * self.n if m is None else m
        if multi_index_order(k) > self.K:
            return 0j
        return complex(self.block(m)[tuple(int(x) + self.K for x in k)])

    def amplitudes(self, k: Sequence[int], m: Sequence[int] | None = None) -> tuple[float, float]:
        """Cosine and sine amplitudes of mode ``k`` (``k`` and ``-k`` merged)."""
        c = self.mode(k, m)
        if all(int(x) == 0 for x in k):
            return c.real, 0.0
        return 2.0 * c.real, -2.0 * c.imag

    def terms(self, tol: float = 0.0) -> list[dict]:
        """Sparse real view: one record per retained mode of a half space."""
        out = []
        kv = mode_vectors(self.n, self.K).reshape(self.n, -1).T
        for m, block in zip(self.monomials, self._coeffs):
            flat = block.reshape(-1)
            for idx in np.flatnonzero(np.abs(flat) > tol):
                k = kv[idx]
                nz = np.flatnonzero(k)
                if nz.size and k[nz[0]] < 0:
                    continue
                a, b = self.amplitudes(k, m)
                if abs(a) > tol or abs(b) > tol:
                    out.append({"k": [int(x) for x in k], "m": list(m), "cos": a, "sin": b})
        return out

    def l1_mass(self) -> float:
        return float(np.abs(self._coeffs).sum())

    def max_mode_order(self) -> int:
        active = np.abs(self._coeffs).sum(axis=0) > 0
        if not active.any():
            return 0
        return int(mode_orders(self.n, self.K)[active].max())

    def with_truncation(self, K: int | None = None, dI: int | None = None) -> "FourierTaylorSeries":
        """Re-truncate (or pad) to order ``K`` and action degree ``dI``."""
        K = self.K if K is None else K
        dI = self.dI if dI is None else dI
        c = resize_box(self._coeffs, self.n, self.K, K) if K >= self.K else None
        if c is None:
            c = resize_box(self._coeffs, self.n, self.K, K)
            c = np.where(l1_mask(self.n, K), c, 0.0)
        lost = self.l1_mass() - float(np.abs(c).sum())
        out = np.zeros((len(action_monomials(self.n, dI)),) + c.shape[1:], dtype=complex)
        index = _monomial_index(self.n, dI)
        for m, block in zip(self.monomials, c):
            if m in index:
                out[index[m]] = block
            else:
                lost += float(np.abs(block).sum())
        return FourierTaylorSeries(out, truncation_mass=self.truncation_mass + max(lost, 0.0))

    # -- arithmetic sugar -----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, FourierTaylorSeries):
            return add_scale(self, other, 1.0, 1.0)
        return add_scale(self, FourierTaylorSeries.constant(float(other), self.n), 1.0, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, FourierTaylorSeries):
            return add_scale(self, other, 1.0, -1.0)
        return add_scale(self, FourierTaylorSeries.constant(float(other), self.n), 1.0, -1.0)

    def __neg__(self):
        return FourierTaylorSeries(-self._coeffs)

    def __mul__(self, other):
        if isinstance(other, FourierTaylorSeries):
            return multiply(self, other)
        return FourierTaylorSeries(self._coeffs * float(other), self.truncation_mass * abs(float(other)))

    __rmul__ = __mul__

    def __call__(self, theta, I=None) -> float:
        return evaluate(self, TorusPoint(tuple(np.atleast_1d(theta)), tuple(I) if I is not None else ()))

    def __repr__(self) -> str:
        return f"FourierTaylorSeries(n={self.n}, K={self.K}, dI={self.dI}, modes={len(self.terms())})"

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {"n": self.n, "K": self.K, "dI": self.dI, "terms": self.terms()}

    def to_json(self) -> str:
        return dumps_canonical(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "FourierTaylorSeries":
        terms = [(t["k"], t.get("m"), t.get("cos", 0.0), t.get("sin", 0.0)) for t in data["terms"]]
        return cls.from_terms(int(data["n"]), int(data["K"]), int(data["dI"]), terms)

    @classmethod
    def from_json(cls, text: str) -> "FourierTaylorSeries":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# canonical JSON
# ---------------------------------------------------------------------------


def _canonical(obj):
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return None if math.isnan(x) else ("Infinity" if x > 0 else "-Infinity")
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_canonical(x) for x in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(x) for x in obj]
    return obj


def format_float(x: float) -> str:
    """17 significant digits: enough for an exact round trip."""
    text = format(float(x), ".17g")
    if not any(ch in text for ch in ".e"):
        text += ".0"
    return text


def dumps_canonical(obj, indent: int | None = 1) -> str:
    """JSON with every finite float printed with 17 significant digits."""
    encoder = json.JSONEncoder(indent=indent)
    indent_str = " " * indent if indent is not None else None
    # the stdlib encoder exposes no float hook, so drive its iterator directly
    iterencode = json.encoder._make_iterencode(
        {}, encoder.default, json.encoder.encode_basestring_ascii, indent_str,
        format_float, encoder.key_separator, encoder.item_separator,
        False, False, False,
    )
    return "".join(iterencode(_canonical(obj), 0))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def _check_same_dimension(f: FourierTaylorSeries, g: FourierTaylorSeries) -> None:
    if f.n != g.n:
        raise ValueError(f"dimension mismatch: {f.n} vs {g.n}")


def _as_degree(f: FourierTaylorSeries, K: int, dI: int) -> np.ndarray:
    """Coefficients of ``f`` padded to order ``K`` and action degree ``dI``."""
    c = resize_box(f.coeffs, f.n, f.K, K)
    out = np.zeros((len(action_monomials(f.n, dI)),) + c.shape[1:], dtype=complex)
    index = _monomial_index(f.n, dI)
    for m, block in zip(f.monomials, c):
        out[index[m]] = block
    return out


def add_scale(f: FourierTaylorSeries, g: FourierTaylorSeries, a: float, b: float) -> FourierTaylorSeries:
    """Coefficientwise ``a f + b g`` at the larger truncation and action degree."""
    _check_same_dimension(f, g)
    K = max(f.K, g.K)
    dI = max(f.dI, g.dI)
    c = a * _as_degree(f, K, dI) + b * _as_degree(g, K, dI)
    return FourierTaylorSeries(c, abs(a) * f.truncation_mass + abs(b) * g.truncation_mass)


def _convolve_boxes(c1: np.ndarray, c2: np.ndarray) -> np.ndarray:
    method = "direct" if c1.size * c2.size <= 2_000_000 else "fft"
    return convolve(c1, c2, mode="full", method=method)


def multiply(f: FourierTaylorSeries, g: FourierTaylorSeries, K_out: int | None = None,
             dI_out: int | None = None) -> FourierTaylorSeries:
    """Product of two series truncated to ``K_out`` modes and ``dI_out`` action degree.

    The discarded l1 coefficient mass is recorded in ``truncation_mass`` and
    the policy in ``metadata``.
    """
    _check_same_dimension(f, g)
    n = f.n
    K_out = max(f.K, g.K) if K_out is None else int(K_out)
    dI_out = min(f.dI + g.dI, MAX_ACTION_DEGREE) if dI_out is None else int(dI_out)
    K_full = f.K + g.K
    index = _monomial_index(n, dI_out)
    full = np.zeros((len(index),) + (2 * K_full + 1,) * n, dtype=complex)
    lost = 0.0
    for mf, cf in zip(f.monomials, f.coeffs):
        if not cf.any():
            continue
        for mg, cg in zip(g.monomials, g.coeffs):
            if not cg.any():
                continue
            prod = _convolve_boxes(cf, cg)
            m = tuple(a + b for a, b in zip(mf, mg))
            if m in index:
                full[index[m]] += prod
            else:
                lost += float(np.abs(prod).sum())
    if K_out >= K_full:
        c = resize_box(full, n, K_full, K_out)
    else:
        c = resize_box(full, n, K_full, K_out)
        c = np.where(l1_mask(n, K_out), c, 0.0)
    lost += max(float(np.abs(full).sum()) - float(np.abs(c).sum()), 0.0)
    meta = {"operation": "multiply", "K_out": K_out, "dI_out": dI_out, "discarded_l1": lost}
    return FourierTaylorSeries(c, truncation_mass=lost, metadata=meta)


def partial_derivative(f: FourierTaylorSeries, variable: str, index: int) -> FourierTaylorSeries:
    """Exact derivative in ``theta_index`` (``variable='theta'``) or ``I_index`` (``'action'``)."""
    if not 0 <= index < f.n:
        raise ValueError(f"index {index} out of range for n={f.n}")
    if variable in ("theta", "angle"):
        orders = [0] * f.n
        orders[index] = 1
        return FourierTaylorSeries(f.coeffs * derivative_factors(f.n, f.K, orders))
    if variable in ("I", "action"):
        dI = max(f.dI - 1, 0)
        target = _monomial_index(f.n, dI)
        out = np.zeros((len(target),) + f.coeffs.shape[1:], dtype=complex)
        for m, block in zip(f.monomials, f.coeffs):
            if m[index] == 0:
                continue
            lowered = list(m)
            lowered[index] -= 1
            out[target[tuple(lowered)]] += m[index] * block
        return FourierTaylorSeries(out)
    raise ValueError(f"unknown variable {variable!r}")


def poisson_bracket(f: FourierTaylorSeries, g: FourierTaylorSeries, K_out: int | None = None) -> FourierTaylorSeries:
    """``{f, g} = grad_theta f . grad_I g - grad_I f . grad_theta g``.

    With this convention ``{C, e + v.I} = v . grad_theta C``.
    """
    _check_same_dimension(f, g)
    K_out = max(f.K, g.K) if K_out is None else K_out
    out = FourierTaylorSeries.zeros(f.n, K_out, 0)
    for i in range(f.n):
        out = add_scale(out, multiply(partial_derivative(f, "theta", i), partial_derivative(g, "action", i),
                                      K_out, MAX_ACTION_DEGREE), 1.0, 1.0)
        out = add_scale(out, multiply(partial_derivative(f, "action", i), partial_derivative(g, "theta", i),
                                      K_out, MAX_ACTION_DEGREE), 1.0, -1.0)
    return out


def integer_direction(v) -> np.ndarray:
    """Integer vector ``q v`` from a rational vector object or an integer array."""
    if hasattr(v, "integer_vector"):
        w = np.asarray(v.integer_vector)
    else:
        w = np.asarray(v)
    wf = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(wf)) or np.any(np.abs(wf - np.round(wf)) > 0):
        raise ValueError(f"direction {w!r} is not an integer vector q*v")
    return np.round(wf).astype(np.int64)


def resonant_mode_mask(n: int, K: int, direction: np.ndarray) -> np.ndarray:
    """Modes ``k`` of the box with ``k . direction == 0``."""
    k = mode_vectors(n, K)
    dot = np.tensordot(np.asarray(direction, dtype=np.int64), k, axes=(0, 0))
    return dot == 0


def average_along(f: FourierTaylorSeries, v) -> FourierTaylorSeries:
    """Average along the periodic flow of ``v``: keep modes with ``k.(q v) = 0``."""
    direction = integer_direction(v)
    if direction.shape != (f.n,):
        raise ValueError("direction dimension mismatch")
    keep = resonant_mode_mask(f.n, f.K, direction)
    return FourierTaylorSeries(np.where(keep, f.coeffs, 0.0))


def full_average(f: FourierTaylorSeries) -> FourierTaylorSeries:
    """Angle average: only the ``k = 0`` mode of every action block survives."""
    keep = mode_orders(f.n, f.K) == 0
    return FourierTaylorSeries(np.where(keep, f.coeffs, 0.0))


def _action_powers(monomials, actions: np.ndarray) -> np.ndarray:
    """``I**m`` for every monomial; ``actions`` has shape ``(P, n)``."""
    out = np.ones((len(monomials), actions.shape[0]))
    for i, m in enumerate(monomials):
        for d, e in enumerate(m):
            if e:
                out[i] *= actions[:, d] ** e
    return out


def evaluate_many(f: FourierTaylorSeries, thetas, actions=None) -> np.ndarray:
    """Evaluate at ``P`` points; ``thetas`` and ``actions`` have shape ``(P, n)``."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[1] != f.n:
        raise ValueError("point dimension mismatch")
    if actions is None:
        actions = np.zeros_like(thetas)
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    vals = evaluate_at_points(f.coeffs, f.n, thetas)  # (blocks, P)
    return np.sum(vals * _action_powers(f.monomials, actions), axis=0)


def evaluate(f: FourierTaylorSeries, point: TorusPoint) -> float:
    """Sum of all retained terms at ``(theta, I)``."""
    if not isinstance(point, TorusPoint):
        theta, actions = point
        point = TorusPoint(tuple(theta), tuple(actions))
    return float(evaluate_many(f, [point.theta], [point.I])[0])


def grid_refit(samples, K: int, action_jet: dict | None = None) -> FourierTaylorSeries:
    """Discrete Fourier analysis of grid samples truncated to ``|k|_1 <= K``.

    Parameters
    ----------
    samples : ndarray
        Values on the regular grid ``theta_j = j/N`` (shape ``(N,)*n``).
    K : int
        Truncation order; every grid side must satisfy ``N >= 2K+2``.
    action_jet : dict, optional
        Maps action multi-indices ``m`` (``|m| <= 2``) to grid samples of the
        Taylor coefficient ``d^m f(theta, 0) / m!``.

    Returns
    -------
    FourierTaylorSeries
        ``truncation_mass`` holds the l1 mass of grid modes outside the
        truncation (the aliasing residual).
    """
    samples = np.asarray(samples, dtype=float)
    n = samples.ndim
    if any(N < 2 * K + 2 for N in samples.shape):
        raise ValueError(f"grid {samples.shape} too coarse for K={K}: need N >= {2 * K + 2}")
    jet = {(0,) * n: samples}
    for m, vals in (action_jet or {}).items():
        m = tuple(int(x) for x in m)
        if len(m) != n:
            raise ValueError("action index dimension mismatch")
        vals = np.asarray(vals, dtype=float)
        if vals.shape != samples.shape:
            raise ValueError("action jet grid differs from the value grid")
        jet[m] = vals
    dI = max(sum(m) for m in jet)
    if dI > MAX_ACTION_DEGREE:
        raise ValueError("action degree is capped at 2")
    index = _monomial_index(n, dI)
    c = np.zeros((len(index),) + (2 * K + 1,) * n, dtype=complex)
    lost = 0.0
    for m, vals in jet.items():
        box, mass = grid_to_coeffs(vals, n, K)
        c[index[m]] = box
        lost += mass
    return FourierTaylorSeries(c, truncation_mass=lost, metadata={"operation": "grid_refit", "K": K})


def sample_grid(f: FourierTaylorSeries, N: int, m: Sequence[int] | None = None) -> np.ndarray:
    """Values of the action block ``m`` (default ``I**0``) on the ``N**n`` grid."""
    m = (0,) * f.n if m is None else m
    return coeffs_to_grid(f.block(m), f.n, N)


def read_grid_csv(path: str, n: int) -> np.ndarray:
    """Row-major CSV of grid samples reshaped to ``(N,)*n``."""
    flat = np.loadtxt(path, delimiter=",", dtype=float).reshape(-1)
    N = round(flat.size ** (1.0 / n))
    if N**n != flat.size:
        raise ValueError(f"{flat.size} samples do not form an n={n} square grid")
    return flat.reshape((N,) * n)
