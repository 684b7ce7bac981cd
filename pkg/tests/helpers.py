"""Shared builders for the test suite."""

import math

import mpmath
import numpy as np

from gevkam.series import FourierTaylorSeries, action_monomials


def random_series(seed: int, n: int = 2, K: int = 3, dI: int = 0, terms: int = 5,
                  scale: float = 1.0) -> FourierTaylorSeries:
    """Real series with a few random modes of order at most ``K``."""
    rng = np.random.default_rng(seed)
    records = []
    monomials = action_monomials(n, dI)
    for _ in range(terms):
        while True:
            k = rng.integers(-K, K + 1, size=n)
            if np.abs(k).sum() <= K:
                break
        m = monomials[rng.integers(len(monomials))]
        records.append((k, m, scale * rng.normal(), scale * rng.normal()))
    return FourierTaylorSeries.from_terms(n, K, dI, records)


def random_points(seed: int, count: int, n: int = 2, action_scale: float = 0.5):
    rng = np.random.default_rng(seed)
    return rng.random((count, n)), action_scale * rng.normal(size=(count, n))


def brute_norm(f: FourierTaylorSeries, alpha: float, s: float, L: int = 400, period: float = 1.0) -> float:
    """Direct scan of the weighted mode-sum terms in 50-digit arithmetic."""
    with mpmath.workdps(50):
        weights = {}
        for t in f.terms():
            q = sum(abs(x) for x in t["k"])
            amp = abs(f.mode(t["k"])) * (1 if q == 0 else 2)
            weights[q] = weights.get(q, 0) + mpmath.mpf(amp)
        a = 2 * mpmath.pi / period
        best = mpmath.mpf(0)
        for l in range(L + 1):
            jet = sum(w * (a * q) ** l for q, w in weights.items()) if l else sum(weights.values())
            term = (l + 1) ** 2 * mpmath.mpf(s) ** (alpha * l) * jet / mpmath.factorial(l) ** alpha
            best = max(best, term)
        return float(4 * math.pi**2 / 3 * best)
