"""Problem builders for the KAM solver.

* ``expand_at_action`` rewrites ``h(p) + eps f(theta, p)`` around the actions
  ``p0(w)`` with ``grad h(p0) = w``, giving the frequency-parameterized form
  ``e(w) + w.I + A + B.I + M I.I`` sampled on angle grids.
* ``vector_field_embed`` turns a vector field ``w + B(theta)`` on the torus
  into the Hamiltonian ``w.I + B(theta).I``.
* ``bessi_hamiltonian`` builds a Gevrey-damped four-mode perturbation on the
  ``2 pi`` torus and measures its norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .arithmetic import GOLDEN, as_exact, l1_shell, normalize_frequency
from .gevrey import GevreyParams, norm_trig_poly
from .kam import KamConfig, NodeGrid, ParamHamiltonian, SampledHamiltonian, decompose
from .series import (
    FourierTaylorSeries,
    coeffs_to_grid,
    multi_index_order,
    resize_box,
)

INTEGRABLE_KINDS = ("quadratic", "diagonal", "quartic")


class NewtonError(ArithmeticError):
    """The frequency map ``p -> grad h(p)`` could not be inverted."""


# ---------------------------------------------------------------------------
# integrable part
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntegrableSpec:
    """Preset integrable Hamiltonians.

    ``quadratic``: ``h = |p|^2 / 2``.
    ``diagonal``: ``h = p.Lambda p / 2`` with ``Lambda = diag(lambdas)``.
    ``quartic``: ``h = |p|^2 / 2 + beta/4 sum p_i^4``.
    """

    kind: str = "quadratic"
    n: int = 2
    lambdas: tuple = ()
    beta: float = 0.0

    def __post_init__(self):
        if self.kind not in INTEGRABLE_KINDS:
            raise ValueError(f"unknown integrable kind {self.kind!r}; choose from {INTEGRABLE_KINDS}")
        if self.kind == "diagonal":
            lam = tuple(float(x) for x in self.lambdas)
            if len(lam) != self.n:
                raise ValueError("diagonal kind needs one lambda per degree of freedom")
            object.__setattr__(self, "lambdas", lam)

    @classmethod
    def from_dict(cls, data: dict, n: int) -> "IntegrableSpec":
        return cls(kind=data.get("kind", "quadratic"), n=int(data.get("n", n)),
                   lambdas=tuple(data.get("lambdas", ())), beta=float(data.get("beta", 0.0)))

    def _diag(self) -> np.ndarray:
        return np.asarray(self.lambdas) if self.kind == "diagonal" else np.ones(self.n)

    def h(self, p) -> float:
        p = np.asarray(p, dtype=float)
        out = 0.5 * float(p @ (self._diag() * p))
        if self.kind == "quartic":
            out += 0.25 * self.beta * float(np.sum(p**4))
        return out

    def grad_h(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        g = self._diag() * p
        if self.kind == "quartic":
            g = g + self.beta * p**3
        return g

    def hess_h(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        d = self._diag().copy()
        if self.kind == "quartic":
            d = d + 3.0 * self.beta * p**2
        return np.diag(d)

    def nondegenerate(self, p) -> bool:
        return abs(float(np.linalg.det(self.hess_h(p)))) > 1e-10

    def bordered_hessian_det(self, p) -> float:
        """Determinant of ``[[hess h, grad h], [grad h^T, 0]]``."""
        n = self.n
        m = np.zeros((n + 1, n + 1))
        m[:n, :n] = self.hess_h(p)
        m[:n, n] = m[n, :n] = self.grad_h(p)
        return float(np.linalg.det(m))

    def invert_gradient(self, w, tol: float = 1e-15, max_iter: int = 60) -> np.ndarray:
        """``p`` with ``grad h(p) = w`` by Newton's method started at ``p = w``."""
        w = np.asarray(w, dtype=float)
        d = self._diag()
        p = w / np.where(d != 0.0, d, 1.0)
        for _ in range(max_iter):
            r = self.grad_h(p) - w
            if float(np.abs(r).max()) <= tol * max(1.0, float(np.abs(w).max())):
                return p
            J = self.hess_h(p)
            if abs(float(np.linalg.det(J))) <= 1e-14:
                raise NewtonError(f"singular Hessian at p={p.tolist()}")
            p = p - np.linalg.solve(J, r)
        r = float(np.abs(self.grad_h(p) - w).max())
        if r > 1e-12:
            raise NewtonError(f"Newton inversion of grad h did not converge (residual {r:.3g})")
        return p

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n": self.n, "lambdas": list(self.lambdas), "beta": self.beta}


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------


def perturbation_from_terms(n: int, terms: Sequence[dict], K: int | None = None) -> FourierTaylorSeries:
    """Series in ``(theta, p)`` from records ``{"k", "cos", "sin", "m"}``.

    Each record adds ``(cos cos(2 pi k.theta) + sin sin(2 pi k.theta)) p**m``.
    """
    records = []
    for t in terms:
        k = tuple(int(x) for x in t["k"])
        m = tuple(int(x) for x in t.get("m", (0,) * n))
        records.append((k, m, float(t.get("cos", 0.0)), float(t.get("sin", 0.0))))
    if not records:
        return FourierTaylorSeries.zeros(n, 0 if K is None else K)
    K_needed = max(multi_index_order(k) for k, _, _, _ in records)
    dI = max(sum(m) for _, m, _, _ in records)
    return FourierTaylorSeries.from_terms(n, max(K_needed, K or 0), dI, records)


def _shifted_jets(f: FourierTaylorSeries, p0: np.ndarray) -> dict:
    """Coefficient boxes of ``f(theta, p0 + I)`` for every monomial ``I**m``."""
    out: dict = {}
    for mp in f.monomials:
        block = f.block(mp)
        if not block.any():
            continue
        ranges = [range(x + 1) for x in mp]
        for m in np.ndindex(*[len(r) for r in ranges]):
            weight = 1.0
            for d in range(f.n):
                weight *= math.comb(mp[d], m[d]) * p0[d] ** (mp[d] - m[d])
            if weight == 0.0:
                continue
            out[m] = out.get(m, 0.0) + weight * block
    return out


@dataclass
class ExpansionReport:
    """Actions of the frequency nodes and the non-degeneracy data."""

    actions: np.ndarray
    newton_residual: float
    hessian_det: list
    bordered_hessian_det: list
    truncated_action_terms: bool

    def to_dict(self) -> dict:
        return {"actions": self.actions.tolist(), "newton_residual": self.newton_residual,
                "hessian_det": self.hessian_det, "bordered_hessian_det": self.bordered_hessian_det,
                "truncated_action_terms": self.truncated_action_terms}


def expand_at_action(spec: IntegrableSpec, f: FourierTaylorSeries, epsilon: float, nodes: NodeGrid,
                     N: int) -> tuple[SampledHamiltonian, ExpansionReport]:
    """Sample ``h(p0 + I) + eps f(theta, p0 + I)`` as action jets at every node ``w = grad h(p0)``.

    The action dependence is kept to degree two: ``M`` is ``hess h(p0) / 2``
    plus the degree-two part of ``eps f``; higher Taylor terms of ``h`` (the
    quartic preset) are dropped and flagged in the report.
    """
    n = nodes.n
    if f.n != n or spec.n != n:
        raise ValueError("dimension mismatch between h, f and the nodes")
    jets, actions, dets, bordered = [], [], [], []
    residual = 0.0
    for w in nodes.points:
        p0 = spec.invert_gradient(w)
        residual = max(residual, float(np.abs(spec.grad_h(p0) - w).max()))
        actions.append(p0)
        hess = spec.hess_h(p0)
        dets.append(float(np.linalg.det(hess)))
        bordered.append(spec.bordered_hessian_det(p0))
        shifted = _shifted_jets(f, p0)
        jet = {}
        zero = (0,) * n
        base = {zero: spec.h(p0)}
        for a in range(n):
            ea = tuple(1 if i == a else 0 for i in range(n))
            base[ea] = float(w[a])
            for b in range(a, n):
                m = [0] * n
                m[a] += 1
                m[b] += 1
                base[tuple(m)] = 0.5 * hess[a, a] if a == b else hess[a, b]
        for m in set(base) | set(shifted):
            vals = np.full((N,) * n, base.get(m, 0.0))
            if m in shifted:
                vals = vals + epsilon * coeffs_to_grid(shifted[m], n, N)
            jet[m] = vals
        if zero not in jet:
            jet[zero] = np.zeros((N,) * n)
        jets.append(jet)
    report = ExpansionReport(np.array(actions), residual, dets, bordered, spec.kind == "quartic")
    meta = {"integrable": spec.to_dict(), "epsilon": float(epsilon)}
    return SampledHamiltonian(jets, meta), report


# ---------------------------------------------------------------------------
# vector fields
# ---------------------------------------------------------------------------


def vector_field_embed(B: Sequence[FourierTaylorSeries], r: float, h: float, omega0: Sequence[float],
                       gevrey: GevreyParams, K: int | None = None, degree: int = 3) -> ParamHamiltonian:
    """``w.I + B(theta).I`` on the node ball of radius ``h`` around ``omega0``.

    ``B`` is the same at every node; ``A``, ``M`` and ``e`` vanish.
    """
    n = len(omega0)
    if len(B) != n:
        raise ValueError("B needs one component per angle")
    K = max(b.K for b in B) if K is None else K
    nodes = NodeGrid(tuple(omega0), h, degree)
    P = nodes.size
    box = (2 * K + 1,) * n
    comps = np.stack([resize_box(b.block((0,) * n), n, b.K, K) for b in B])
    Bs = np.broadcast_to(comps, (P, n) + box).astype(complex)
    return ParamHamiltonian(nodes, np.zeros(P), np.zeros((P,) + box, dtype=complex), Bs.copy(),
                            np.zeros((P, n, n) + box, dtype=complex), r, gevrey,
                            {"mode": "vector_field", "epsilon": 0.0, "eta": 0.0})


# ---------------------------------------------------------------------------
# problem assembly from a configuration
# ---------------------------------------------------------------------------


def parse_frequency(spec) -> tuple:
    """``"golden"``, a list of numbers, or ``{"fraction": [[num, den], ...]}``."""
    if isinstance(spec, str):
        if spec.lower() == "golden":
            return (1.0, GOLDEN)
        raise ValueError(f"unknown frequency name {spec!r}")
    if isinstance(spec, dict) and "fraction" in spec:
        return tuple(Fraction(int(a), int(b)) for a, b in spec["fraction"])
    return tuple(float(x) for x in spec)


@dataclass
class KamProblem:
    """Parameterized Hamiltonian with the data needed to run and verify it."""

    H: ParamHamiltonian
    omega0: tuple
    mode: str
    epsilon: float
    wiring: dict
    expansion: ExpansionReport | None = None
    perturbation: FourierTaylorSeries | None = None
    integrable: IntegrableSpec | None = None
    extra: dict = field(default_factory=dict)


def build_problem(problem: dict, config: KamConfig, n: int = 2) -> KamProblem:
    """Assemble the starting Hamiltonian from a ``problem`` configuration section.

    Keys: ``mode`` (``"hamiltonian"`` or ``"vector_field"``), ``omega0``,
    ``integrable`` (for the Hamiltonian mode), ``perturbation`` (list of term
    records), ``epsilon`` (perturbation size), ``B`` (for the vector-field
    mode: one term list per component), ``node_degree``.
    """
    mode = problem.get("mode", "hamiltonian")
    omega0 = parse_frequency(problem.get("omega0", "golden"))
    if len(omega0) != n:
        raise ValueError(f"omega0 has {len(omega0)} components, expected {n}")
    normalized, scale = normalize_frequency(omega0)
    if scale != 1.0 or tuple(float(x) for x in normalized) != tuple(float(x) for x in omega0):
        raise ValueError("omega0 must already be normalised as (1, ...) with entries in [-1, 1]")
    omega_f = tuple(float(x) for x in omega0)
    degree = int(problem.get("node_degree", 3))
    gevrey = GevreyParams(config.alpha, config.s)
    K = config.K
    if mode == "vector_field":
        comps = problem.get("B")
        if comps is None or len(comps) != n:
            raise ValueError("vector_field mode needs one term list per component of B")
        B = [perturbation_from_terms(n, terms, K) for terms in comps]
        if any(b.K > K or b.dI > 0 for b in B):
            raise ValueError(f"B must be angle-only with modes up to K={K}")
        H = vector_field_embed(B, config.r, config.h, omega_f, gevrey, K, degree)
        return KamProblem(H, omega0, mode, 0.0, {"epsilon": 0.0, "eta": 0.0})
    if mode != "hamiltonian":
        raise ValueError(f"unknown problem mode {mode!r}")
    spec = IntegrableSpec.from_dict(problem.get("integrable", {}), n)
    f = perturbation_from_terms(n, problem.get("perturbation", []), None)
    if f.K > K:
        raise ValueError(f"perturbation modes exceed the truncation order K={K}")
    eps = float(problem.get("epsilon", 0.0))
    nodes = NodeGrid(omega_f, config.h, degree)
    N = 4 * K + 4 if config.N is None else config.N
    sampled, report = expand_at_action(spec, f, eps, nodes, N)
    H = decompose(sampled, nodes, config.r, config.h, K, gevrey, config.alias_budget)
    norms = H.norms()
    a = norms["A_max"]
    wiring = {"epsilon": a, "mu": math.sqrt(a), "eta": H.eta(), "problem_epsilon": eps,
              "A_over_epsilon": a / eps if eps > 0 else 0.0}
    return KamProblem(H, omega0, mode, eps, wiring, report, f, spec)


# ---------------------------------------------------------------------------
# Gevrey-damped destruction family
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BessiSpec:
    """Parameters of ``eps nu (1 - cos k.theta)(1 + mu nu~ cos k~.theta)`` on the ``2 pi`` torus."""

    alpha: float
    s: float
    epsilon: float
    mu: float
    k: tuple
    k_tilde: tuple

    def __post_init__(self):
        object.__setattr__(self, "k", tuple(int(x) for x in self.k))
        object.__setattr__(self, "k_tilde", tuple(int(x) for x in self.k_tilde))
        if len(self.k) != len(self.k_tilde):
            raise ValueError("k and k_tilde must have the same dimension")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")
        if self.alpha < 1.0 or self.s <= 0.0:
            raise ValueError("need alpha >= 1 and s > 0")
        if sum(a * b for a, b in zip(self.k, self.k_tilde)) != 0:
            raise ValueError("k_tilde must be orthogonal to k")
        if multi_index_order(self.k_tilde) > multi_index_order(self.k):
            raise ValueError("|k_tilde| must not exceed |k|")
        if not any(self.k):
            raise ValueError("k must be non-zero")

    @classmethod
    def from_dict(cls, data: dict) -> "BessiSpec":
        return cls(float(data["alpha"]), float(data["s"]), float(data["epsilon"]), float(data["mu"]),
                   tuple(data["k"]), tuple(data["k_tilde"]))

    @property
    def n(self) -> int:
        return len(self.k)

    @property
    def nu(self) -> float:
        return math.exp(-self.s * self.alpha * (4 * multi_index_order(self.k)) ** (1.0 / self.alpha))

    @property
    def nu_tilde(self) -> float:
        return math.exp(-self.s * self.alpha * (4 * multi_index_order(self.k_tilde)) ** (1.0 / self.alpha))

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "s": self.s, "epsilon": self.epsilon, "mu": self.mu,
                "k": list(self.k), "k_tilde": list(self.k_tilde), "nu": self.nu, "nu_tilde": self.nu_tilde}


@dataclass
class BessiResult:
    F: FourierTaylorSeries
    norm: float
    ratio: float
    spec: BessiSpec

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "norm": self.norm, "norm_over_epsilon": self.ratio,
                "terms": self.F.terms(), "series": self.F.to_dict()}


def bessi_hamiltonian(spec: BessiSpec) -> BessiResult:
    """Mode expansion of the perturbation and its Gevrey norm on the ``2 pi`` torus.

    The product expands into the modes ``0, k, k~, k + k~, k - k~``; a mode
    ``k`` on the ``2 pi`` torus is ``cos(2 pi k.x)`` in unit-torus angles
    ``x = theta / (2 pi)``, and the norm uses period ``2 pi`` so derivatives
    carry the factor ``|k|`` only.
    """
    n = spec.n
    k = np.array(spec.k)
    kt = np.array(spec.k_tilde)
    c = spec.epsilon * spec.nu
    m = spec.mu * spec.nu_tilde
    zero = (0,) * n
    terms = [(zero, None, c, 0.0), (tuple(k), None, -c, 0.0)]
    if m != 0.0 and kt.any():
        terms += [(tuple(kt), None, c * m, 0.0), (tuple(k + kt), None, -0.5 * c * m, 0.0),
                  (tuple(k - kt), None, -0.5 * c * m, 0.0)]
    elif m != 0.0:
        # k~ = 0: the second factor is the constant 1 + m
        terms = [(zero, None, c * (1 + m), 0.0), (tuple(k), None, -c * (1 + m), 0.0)]
    K = max(multi_index_order(t[0]) for t in terms)
    F = FourierTaylorSeries.from_terms(n, K, 0, terms)
    norm = norm_trig_poly(F, GevreyParams(spec.alpha, spec.s), torus_period=2.0 * math.pi)
    return BessiResult(F, norm, norm / spec.epsilon, spec)


@dataclass
class WitnessReport:
    """Integer vectors with ``0 < |k.omega| <= exp(-s0 alpha (4|k|)^(1/alpha))``."""

    omega: tuple
    alpha: float
    s0: float
    horizon: int
    witnesses: list
    exact: bool

    def to_dict(self) -> dict:
        return {"omega": [str(x) if isinstance(x, Fraction) else x for x in self.omega], "alpha": self.alpha,
                "s0": self.s0, "horizon": self.horizon, "exact": self.exact, "count": len(self.witnesses),
                "witnesses": self.witnesses}


def condition_C_alpha(omega, alpha: float, s0: float, horizon: int) -> WitnessReport:
    """Scan ``|k|_1 <= horizon`` (one of each pair ``+-k``) for small-divisor witnesses.

    Rational frequencies are checked with exact fractions; an empty list only
    means that no witness exists below the horizon.
    """
    omega = tuple(omega)
    n = len(omega)
    exact = as_exact(omega)
    w = np.array([float(x) for x in omega])
    found = []
    for q in range(1, horizon + 1):
        bound = math.exp(-s0 * alpha * (4 * q) ** (1.0 / alpha))
        shell = l1_shell(n, q)
        dots = np.abs(shell @ w)
        # float screening with slack, then the exact test where available
        candidates = np.nonzero(dots <= bound * (1 + 1e-9) + 1e-15)[0]
        for i in candidates:
            k = tuple(int(x) for x in shell[i])
            if exact is not None:
                d = abs(sum(Fraction(a) * b for a, b in zip(k, exact)))
                if d == 0 or d > Fraction(bound):
                    continue
                value = float(d)
            else:
                value = float(dots[i])
                if value == 0.0 or value > bound:
                    continue
            found.append({"k": list(k), "order": q, "abs_dot": value, "bound": bound})
    return WitnessReport(omega, float(alpha), float(s0), int(horizon), found, exact is not None)
