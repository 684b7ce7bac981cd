"""Rational approximation bases of a frequency vector.

Each basis vector is ``v = (1, p/q)`` with integer multiple ``w = q v``; the
integer vectors ``w_1..w_n`` must form a basis of ``Z**n`` (determinant
``+-1``, checked with exact integers).  Averaging successively along the flows
of ``v_1..v_n`` then removes every non-zero Fourier mode.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .arithmetic import as_exact, cf_convergents, psi_of, normalize_frequency


@dataclass(frozen=True)
class RationalVector:
    """``v = (1, p_1/q, ..., p_{n-1}/q)`` with denominator ``q >= 1``."""

    p: tuple
    q: int

    def __post_init__(self):
        if int(self.q) < 1:
            raise ValueError("denominator must be positive")
        object.__setattr__(self, "p", tuple(int(x) for x in self.p))
        object.__setattr__(self, "q", int(self.q))

    @property
    def n(self) -> int:
        return len(self.p) + 1

    @property
    def integer_vector(self) -> tuple:
        """``q v = (q, p_1, ..., p_{n-1})``."""
        return (self.q,) + self.p

    @property
    def value(self) -> np.ndarray:
        return np.array([1.0] + [pi / self.q for pi in self.p])

    def exact(self) -> tuple:
        return (Fraction(1),) + tuple(Fraction(pi, self.q) for pi in self.p)

    def distance(self, omega) -> float:
        """``|omega - v|_1`` computed exactly when ``omega`` is rational."""
        ex = as_exact(omega)
        if ex is not None:
            return float(sum(abs(a - b) for a, b in zip(ex, self.exact())))
        w = [float(x) for x in omega]
        # |omega_i - p_i/q| = |q omega_i - p_i| / q keeps more digits than the difference of floats
        return sum(abs(self.q * wi - pi) for wi, pi in zip(w[1:], self.p)) / self.q + abs(w[0] - 1.0)

    def to_dict(self) -> dict:
        return {"p": list(self.p), "q": self.q}


def integer_determinant(rows: Sequence[Sequence[int]]) -> int:
    """Exact determinant of a square integer matrix (fraction-free elimination)."""
    m = [[int(x) for x in r] for r in rows]
    n = len(m)
    if any(len(r) != n for r in m):
        raise ValueError("matrix must be square")
    sign, prev = 1, 1
    for k in range(n - 1):
        if m[k][k] == 0:
            swap = next((i for i in range(k + 1, n) if m[i][k] != 0), None)
            if swap is None:
                return 0
            m[k], m[swap] = m[swap], m[k]
            sign = -sign
        for i in range(k + 1, n):
            for j in range(k + 1, n):
                m[i][j] = (m[i][j] * m[k][k] - m[i][k] * m[k][j]) // prev
        prev = m[k][k]
    return sign * m[n - 1][n - 1]


@dataclass(frozen=True)
class ApproxBasis:
    """Unimodular approximation basis at approximation parameter ``Q``."""

    vectors: tuple
    Q: float
    omega: tuple

    @property
    def n(self) -> int:
        return len(self.vectors)

    @property
    def denominators(self) -> tuple:
        return tuple(v.q for v in self.vectors)

    @property
    def integer_matrix(self) -> list:
        return [list(v.integer_vector) for v in self.vectors]

    @property
    def det(self) -> int:
        return integer_determinant(self.integer_matrix)

    @property
    def quality(self) -> tuple:
        """``|omega - v_j| q_j Q`` for each vector."""
        return tuple(v.distance(self.omega) * v.q * self.Q for v in self.vectors)

    def to_dict(self) -> dict:
        return {"Q": self.Q, "vectors": [v.to_dict() for v in self.vectors], "det": self.det,
                "quality": list(self.quality)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class BasisReport:
    det: int
    unimodular: bool
    quality: tuple
    max_quality: float
    denominator_ratios: tuple
    psi_Q: float

    def to_dict(self) -> dict:
        return {"det": self.det, "unimodular": self.unimodular, "quality": list(self.quality),
                "max_quality": self.max_quality, "denominator_over_psi": list(self.denominator_ratios),
                "psi_Q": self.psi_Q}


def verify_basis(basis: ApproxBasis, omega=None, psi_Q: float | None = None) -> BasisReport:
    """Recompute determinant, qualities and ``q_j / Psi(Q)``."""
    omega = basis.omega if omega is None else tuple(omega)
    b = ApproxBasis(basis.vectors, basis.Q, omega)
    det = b.det
    if psi_Q is None:
        psi_Q = float(psi_of(omega, max(b.Q, 1.0)).value) if b.Q <= 400 else math.nan
    ratios = tuple(v.q / psi_Q if psi_Q and math.isfinite(psi_Q) else math.nan for v in b.vectors)
    quality = b.quality
    return BasisReport(det, abs(det) == 1, quality, max(quality), ratios, psi_Q)


def basis_from_convergents(nu, k: int, Q: float | None = None) -> ApproxBasis:
    """Consecutive convergents ``p_k/q_k, p_{k+1}/q_{k+1}`` (indices from 1) of ``nu``."""
    convs, _ = cf_convergents(abs(nu), k + 2)
    if len(convs) < k + 1:
        raise ValueError("continued fraction too short for this index")
    sign = 1 if nu >= 0 else -1
    (p1, q1), (p2, q2) = convs[k - 1], convs[k]
    Q = float(q1) if Q is None else float(Q)
    omega = (1, nu) if isinstance(nu, (int, Fraction)) else (1.0, float(nu))
    return ApproxBasis((RationalVector((sign * p1,), q1), RationalVector((sign * p2,), q2)), Q, omega)


class NoBasisFound(ValueError):
    def __init__(self, message: str, best_quality: float):
        super().__init__(message)
        self.best_quality = best_quality


def _approx_two(omega, Q: float) -> ApproxBasis:
    nu = omega[1]
    convs, truncated = cf_convergents(abs(nu), 200)
    qs = [q for _, q in convs]
    idx = [i for i, q in enumerate(qs) if q <= Q]
    if not idx:
        raise NoBasisFound("no convergent below Q", math.inf)
    m = idx[-1]
    if m + 1 >= len(convs):
        raise NoBasisFound("continued fraction ends before Q: frequency is rational to working precision",
                           math.inf)
    sign = 1 if nu >= 0 else -1
    (p1, q1), (p2, q2) = convs[m], convs[m + 1]
    return ApproxBasis((RationalVector((sign * p1,), q1), RationalVector((sign * p2,), q2)), float(Q), tuple(omega))


def _candidates(omega, max_q: int, keep: int) -> list[RationalVector]:
    """Best simultaneous approximations ``round(q omega)`` for ``q <= max_q``."""
    w = np.array([float(x) for x in omega[1:]])
    q = np.arange(1, max_q + 1)
    p = np.rint(np.outer(q, w)).astype(np.int64)
    err = np.abs(np.outer(q, w) - p).sum(axis=1)  # = q |omega - v|_1
    order = np.argsort(err, kind="stable")[:keep]
    return [RationalVector(tuple(int(x) for x in p[i]), int(q[i])) for i in order]


def _egcd(a: int, b: int) -> tuple[int, int, int]:
    if b == 0:
        return (abs(a), 1 if a >= 0 else -1, 0)
    g, x, y = _egcd(b, a % b)
    return g, y, x - (a // b) * y


def _solve_unit_dot(c: Sequence[int]) -> tuple[int, ...] | None:
    """Integer ``x`` with ``c . x = 1`` when ``gcd(c) = 1``."""
    g, x0, y0 = _egcd(c[0], c[1])
    if len(c) == 2:
        return (x0, y0) if g == 1 else None
    g2, a, b = _egcd(g, c[2])
    if g2 != 1:
        return None
    return (a * x0, a * y0, b)


def _cross(a, b) -> tuple[int, int, int]:
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def _complete_pair(w1, w2, omega, Q: float, search: int = 40) -> RationalVector | None:
    """Third vector ``w3`` with ``det(w1, w2, w3) = +-1`` and small quality."""
    c = _cross(w1, w2)
    if math.gcd(*c) != 1:
        return None
    x = _solve_unit_dot(c)
    if x is None:
        return None
    best, best_q = None, math.inf
    w = np.array([float(t) for t in omega])
    for a in range(-search, search + 1):
        for b in range(-search, search + 1):
            cand = tuple(x[i] + a * w1[i] + b * w2[i] for i in range(3))
            if cand[0] == 0:
                continue
            if cand[0] < 0:
                cand = tuple(-t for t in cand)
            v = RationalVector(cand[1:], cand[0])
            quality = v.distance(omega) * v.q * Q
            if quality < best_q:
                best, best_q = v, quality
    return best


def _approx_three(omega, Q: float, C: float, keep: int, max_q: int | None) -> ApproxBasis:
    psi_Q = float(psi_of(omega, Q).value)
    limit = int(min(max(2, C * psi_Q), max_q or 10**6))
    cands = _candidates(omega, limit, keep)
    best, best_val = None, math.inf
    for trio in itertools.combinations(cands, 3):
        if abs(integer_determinant([v.integer_vector for v in trio])) != 1:
            continue
        val = max(v.distance(omega) * v.q * Q for v in trio)
        if val < best_val:
            best, best_val = trio, val
    if best is None:
        for v1, v2 in itertools.combinations(cands[: min(len(cands), 12)], 2):
            v3 = _complete_pair(v1.integer_vector, v2.integer_vector, omega, Q)
            if v3 is None:
                continue
            trio = (v1, v2, v3)
            val = max(v.distance(omega) * v.q * Q for v in trio)
            if val < best_val:
                best, best_val = trio, val
    if best is None:
        raise NoBasisFound(f"no unimodular triple with denominators <= {limit}", best_val)
    return ApproxBasis(tuple(sorted(best, key=lambda v: v.q)), float(Q), tuple(omega))


def simultaneous_approx(omega, Q: float, C: float = 4.0, keep: int = 40, max_q: int | None = None) -> ApproxBasis:
    """Unimodular approximation basis of ``omega`` at parameter ``Q``.

    Two frequencies use the consecutive convergents ``q_m <= Q < q_{m+1}``;
    three frequencies search denominators ``q <= C Psi(Q)`` for the best
    approximants and complete a pair to a unimodular triple if no triple of
    candidates is unimodular.
    """
    omega = tuple(omega)
    n = len(omega)
    if Q < n + 2:
        raise ValueError(f"Q must be at least n + 2 = {n + 2}")
    norm, _ = normalize_frequency(omega)
    if float(norm[0]) != 1.0 or any(abs(float(x)) > 1.0 for x in omega):
        raise ValueError("frequency must be normalised as (1, ...) with entries in [-1, 1]")
    if psi_of(omega, min(Q, 60)).resonant:
        raise ValueError("resonant frequency")
    if n == 2:
        return _approx_two(omega, Q)
    if n == 3:
        return _approx_three(omega, Q, C, keep, max_q)
    raise NotImplementedError("bases are built for two or three frequencies")
