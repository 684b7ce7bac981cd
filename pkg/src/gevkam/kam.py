"""Iterative KAM normal form for Hamiltonians depending on a frequency parameter.

A parameterized Hamiltonian is stored on a tensor grid of frequency nodes as

    H(theta, I, w) = e(w) + w.I + A(theta, w) + B(theta, w).I + I.M(theta, w) I

with ``A`` of zero angle average.  One KAM step averages ``A`` and ``B``
successively along the periodic flows of a unimodular rational basis
``v_1..v_n`` of the centre frequency, composes the time-one maps of the
generating Hamiltonians ``X_j = C_j + D_j.I``, recomputes ``H o Phi`` on an
angle grid, and re-parameterizes the frequencies so that the linear term is
again ``w.I`` on a ball of half the radius.  Every transformation stays of
the form ``(theta + E(theta), (Id + F(theta)) I + G(theta))``.
"""

from __future__ import annotations

import itertools
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate

from .arithmetic import Envelope, FrequencyProfile, psi_cf_table, psi_of, select_Q0
from .gevrey import GevreyParams, norm_from_coeffs
from .rational_approx import ApproxBasis, simultaneous_approx
from .series import (
    TWO_PI,
    FourierTaylorSeries,
    action_monomials,
    add_scale,
    average_along,
    coeffs_to_grid,
    derivative_factors,
    dumps_canonical,
    evaluate_at_points,
    grid_points,
    grid_refit,
    grid_to_coeffs,
    hermitian_part,
    integer_direction,
    mode_orders,
    mode_vectors,
    poisson_bracket,
    resize_box,
    resonant_mode_mask,
)

DEFAULT_CONSTANTS = {"C": 1.0, "h": 1.0, "r": 1.0, "eta": 1.0}
FLOW_STEPS_PER_UNIT = 64
BRACKET_TOL = 1e-10


class KamWarning(UserWarning):
    """A contraction target of a KAM step was missed."""


class KamPreconditionError(ValueError):
    """A required inequality of the step or of the run does not hold."""

    def __init__(self, inequality: str, lhs: float, rhs: float, step: int | None = None):
        where = "" if step is None else f" at step {step}"
        super().__init__(f"precondition violated{where}: {inequality} ({lhs:.6g} > {rhs:.6g})")
        self.inequality = inequality
        self.lhs = lhs
        self.rhs = rhs
        self.step = step


class AliasingError(ValueError):
    """A grid refit discarded more coefficient mass than the budget allows."""


class FlowError(ValueError):
    """The flow integration produced non-finite values or failed its refit."""


# ---------------------------------------------------------------------------
# frequency nodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeGrid:
    """Tensor grid of Chebyshev-Lobatto nodes on the cube ``|w - center|_inf <= radius``."""

    center: tuple
    radius: float
    degree: int = 3

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(x) for x in self.center))
        if self.degree < 1:
            raise ValueError("node degree must be at least 1")
        if self.radius < 0:
            raise ValueError("node radius must be non-negative")

    @property
    def n(self) -> int:
        return len(self.center)

    @property
    def offsets(self) -> np.ndarray:
        d = self.degree
        if d == 1:
            return np.zeros(1)
        j = np.arange(d)
        return np.sin(np.pi * (2 * j - (d - 1)) / (2 * (d - 1)))

    @property
    def points(self) -> np.ndarray:
        c = np.asarray(self.center)
        offs = np.array(list(itertools.product(self.offsets, repeat=self.n)))
        return c[None, :] + self.radius * offs

    @property
    def size(self) -> int:
        return self.degree**self.n

    @property
    def center_index(self) -> int:
        if self.degree % 2 == 0:
            raise ValueError("an even node degree has no centre node")
        mid = self.degree // 2
        return int(sum(mid * self.degree**p for p in range(self.n)))

    def weights(self, w) -> np.ndarray:
        """Tensor Lagrange weights of the point ``w`` over the nodes."""
        w = np.asarray(w, dtype=float)
        if self.degree == 1 or self.radius == 0.0:
            return np.ones(self.size) / self.size
        x = (w - np.asarray(self.center)) / self.radius
        nodes = self.offsets
        per_dim = []
        for xd in x:
            L = np.ones(self.degree)
            for j in range(self.degree):
                for m in range(self.degree):
                    if m != j:
                        L[j] *= (xd - nodes[m]) / (nodes[j] - nodes[m])
            per_dim.append(L)
        out = per_dim[0]
        for L in per_dim[1:]:
            out = np.outer(out, L).reshape(-1)
        return out

    def interpolate(self, values: np.ndarray, w) -> np.ndarray:
        """Interpolate node values (leading axis over nodes) at ``w``."""
        return np.tensordot(self.weights(w), values, axes=(0, 0))

    def shrink(self, factor: float = 0.5) -> "NodeGrid":
        return NodeGrid(self.center, self.radius * factor, self.degree)

    def to_dict(self) -> dict:
        return {"center": list(self.center), "radius": self.radius, "degree": self.degree}


# ---------------------------------------------------------------------------
# Hamiltonian containers
# ---------------------------------------------------------------------------


def _center_mode(n: int, K: int) -> tuple:
    return (Ellipsis,) + (K,) * n


def _box_order(box: np.ndarray, n: int) -> int:
    return (box.shape[-1] - 1) // 2


def matrix_norm(M: np.ndarray, n: int, params: GevreyParams) -> float:
    """Largest row sum of the entry norms of a matrix of coefficient boxes."""
    rows = [sum(norm_from_coeffs(M[a, b][None], n, params).value for b in range(n)) for a in range(n)]
    return max(rows) if rows else 0.0


def vector_norm(V: np.ndarray, n: int, params: GevreyParams) -> float:
    """l1 combination of the component norms of a vector of coefficient boxes."""
    return norm_from_coeffs(V[:, None], n, params).value


def scalar_norm(a: np.ndarray, n: int, params: GevreyParams) -> float:
    return norm_from_coeffs(a[None], n, params).value


@dataclass
class SampledHamiltonian:
    """Action jets of ``H(theta, ., w)`` at ``I = 0`` sampled on an angle grid per node.

    ``jets[p]`` maps action multi-indices ``m`` (``|m| <= 2``) to grid samples
    of ``d^m H / m!`` at the node ``p``.
    """

    jets: list
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return next(iter(self.jets[0].values())).ndim

    @property
    def N(self) -> int:
        return next(iter(self.jets[0].values())).shape[0]


@dataclass
class ParamHamiltonian:
    """``e + w.I + A + B.I + I.M I`` on a grid of frequency nodes.

    Attributes
    ----------
    nodes : NodeGrid
    e : ndarray, shape ``(P,)``
    A : ndarray, shape ``(P, box)``; zero angle average at every node
    B : ndarray, shape ``(P, n, box)``
    M : ndarray, shape ``(P, n, n, box)``; symmetric in the two matrix axes
    r : float
        Action radius.
    gevrey : GevreyParams
        Current width.
    """

    nodes: NodeGrid
    e: np.ndarray
    A: np.ndarray
    B: np.ndarray
    M: np.ndarray
    r: float
    gevrey: GevreyParams
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.nodes.n

    @property
    def K(self) -> int:
        return _box_order(self.A, self.n)

    @property
    def h(self) -> float:
        return self.nodes.radius

    @property
    def frequencies(self) -> np.ndarray:
        return self.nodes.points

    def A_series(self, p: int) -> FourierTaylorSeries:
        return FourierTaylorSeries(self.A[p][None])

    def B_series(self, p: int) -> list:
        return [FourierTaylorSeries(self.B[p, a][None]) for a in range(self.n)]

    def M_series(self, p: int) -> list:
        return [[FourierTaylorSeries(self.M[p, a, b][None]) for b in range(self.n)] for a in range(self.n)]

    def series_at(self, p: int) -> FourierTaylorSeries:
        """The whole Hamiltonian at node ``p`` as one series of action degree 2."""
        n, K = self.n, self.K
        mons = action_monomials(n, 2)
        index = {m: i for i, m in enumerate(mons)}
        c = np.zeros((len(mons),) + self.A.shape[1:], dtype=complex)
        center = (K,) * n
        c[0] = self.A[p]
        c[(0,) + center] += self.e[p]
        w = self.frequencies[p]
        for a in range(n):
            m = tuple(1 if i == a else 0 for i in range(n))
            c[index[m]] = self.B[p, a]
            c[(index[m],) + center] += w[a]
            for b in range(a, n):
                mm = [0] * n
                mm[a] += 1
                mm[b] += 1
                factor = 1.0 if a == b else 2.0
                c[index[tuple(mm)]] += factor * self.M[p, a, b]
        return FourierTaylorSeries(c)

    def mean_B(self) -> np.ndarray:
        return self.B[_center_mode(self.n, self.K)].real

    def norms(self, params: GevreyParams | None = None) -> dict:
        params = self.gevrey if params is None else params
        n = self.n
        a = [scalar_norm(self.A[p], n, params) for p in range(self.nodes.size)]
        b = [vector_norm(self.B[p], n, params) for p in range(self.nodes.size)]
        return {"A": a, "B": b, "A_max": max(a), "B_max": max(b)}

    def eta(self, params: GevreyParams | None = None) -> float:
        """Norm of the action Hessian ``2 M``, maximised over nodes."""
        params = self.gevrey if params is None else params
        return max(matrix_norm(2.0 * self.M[p], self.n, params) for p in range(self.nodes.size))

    def interpolate(self, w) -> tuple:
        """``(e, A, B, M)`` interpolated at the frequency ``w``."""
        g = self.nodes
        return (float(g.interpolate(self.e, w)), g.interpolate(self.A, w), g.interpolate(self.B, w),
                g.interpolate(self.M, w))

    def with_nodes(self, nodes: NodeGrid, e, A, B, M, r: float, gevrey: GevreyParams) -> "ParamHamiltonian":
        return ParamHamiltonian(nodes, np.asarray(e, dtype=float), A, B, M, r, gevrey, dict(self.metadata))


def decompose(H: SampledHamiltonian, nodes: NodeGrid, r: float, h: float, K: int,
              gevrey: GevreyParams, alias_budget: float = 1e-9) -> ParamHamiltonian:
    """Split sampled action jets into ``e, A, B, M`` at every node.

    ``e`` is the angle average of ``H(., 0, w)``, ``A`` the rest, ``B`` the
    action gradient minus ``w`` and ``M`` the Taylor coefficients of degree two
    (``M_ii = d^2 H / 2 dI_i^2``, ``M_ij = d^2 H / 2 dI_i dI_j``).
    """
    if abs(nodes.radius - h) > 1e-15 * max(1.0, h):
        raise ValueError("node radius differs from h")
    if len(H.jets) != nodes.size:
        raise ValueError(f"{len(H.jets)} sampled nodes for a grid of {nodes.size}")
    n = nodes.n
    if H.n != n:
        raise ValueError("angle dimension differs from the node dimension")
    P = nodes.size
    box = (2 * K + 1,) * n
    e = np.zeros(P)
    A = np.zeros((P,) + box, dtype=complex)
    B = np.zeros((P, n) + box, dtype=complex)
    M = np.zeros((P, n, n) + box, dtype=complex)
    center = (K,) * n
    points = nodes.points
    for p, jet in enumerate(H.jets):
        zero = (0,) * n
        if zero not in jet:
            raise ValueError("the jets need the value block I**0")
        rest = {m: v for m, v in jet.items() if m != zero}
        f = grid_refit(jet[zero], K, rest)
        if f.truncation_mass > alias_budget:
            raise AliasingError(f"aliasing residual {f.truncation_mass:.3g} over budget {alias_budget:.3g} at node {p}")
        mons = f.monomials
        index = {m: i for i, m in enumerate(mons)}
        c = f.coeffs
        A[p] = c[0]
        e[p] = float(A[p][center].real)
        A[p][center] = 0.0
        for a in range(n):
            m = tuple(1 if i == a else 0 for i in range(n))
            if m in index:
                B[p, a] = c[index[m]]
            B[p, a][center] -= points[p, a]
            for b in range(a, n):
                mm = [0] * n
                mm[a] += 1
                mm[b] += 1
                mm = tuple(mm)
                if mm in index:
                    block = c[index[mm]] * (1.0 if a == b else 0.5)
                    M[p, a, b] = block
                    M[p, b, a] = block
    meta = {"K": K, "grid": H.N, **H.metadata}
    return ParamHamiltonian(nodes, e, A, B, M, r, gevrey, meta)


# ---------------------------------------------------------------------------
# evaluation at shifted grid points
# ---------------------------------------------------------------------------


class _ShiftEvaluator:
    """Values of coefficient boxes at ``theta_g + shift_g`` for grid points ``theta_g``.

    Shifts bounded by ``max_shift`` use a Taylor expansion around the grid
    built from spectral derivatives (precomputed once), with remainder below
    ``tol`` times the coefficient mass; larger shifts are summed directly.
    """

    def __init__(self, coeffs: np.ndarray, n: int, N: int, max_shift: float,
                 tol: float = 1e-17, max_order: int = 12):
        c = np.asarray(coeffs)
        self.lead = c.shape[: c.ndim - n]
        self.flat = c.reshape((-1,) + c.shape[c.ndim - n:])
        self.n, self.N = n, N
        self.max_shift = float(max_shift)
        self.terms: list = []
        self.direct = False
        active = np.abs(self.flat).sum(axis=0) > 0
        self.zero = not active.any()
        if self.zero:
            return
        K = _box_order(self.flat, n)
        kmax = int(mode_orders(n, K)[active].max())
        x = TWO_PI * kmax * self.max_shift
        order, term = 0, x
        while term > tol:
            order += 1
            term *= x / (order + 1)
            if order > max_order:
                self.direct = True
                return
        for total in range(order + 1):
            for combo in itertools.combinations_with_replacement(range(n), total):
                j = [0] * n
                for i in combo:
                    j[i] += 1
                scale = 1.0 / math.prod(math.factorial(x) for x in j)
                grid = coeffs_to_grid(self.flat * derivative_factors(n, K, j), n, N) * scale
                self.terms.append((tuple(j), grid))
        self.order = order

    def _direct(self, shift: np.ndarray) -> np.ndarray:
        pts = (grid_points(self.n, self.N) + shift).reshape(self.n, -1).T
        return evaluate_at_points(self.flat, self.n, pts).reshape((-1,) + (self.N,) * self.n)

    def __call__(self, shift: np.ndarray) -> np.ndarray:
        shape = self.lead + (self.N,) * self.n
        if self.zero:
            return np.zeros(shape)
        if self.direct or float(np.abs(shift).max(initial=0.0)) > self.max_shift * (1 + 1e-9):
            return self._direct(shift).reshape(shape)
        powers = []
        for d in range(self.n):
            pw = [np.ones((self.N,) * self.n)]
            for _ in range(self.order):
                pw.append(pw[-1] * shift[d])
            powers.append(pw)
        out = np.zeros((self.flat.shape[0],) + (self.N,) * self.n)
        for j, grid in self.terms:
            weight = None
            for d, jd in enumerate(j):
                if jd:
                    weight = powers[d][jd] if weight is None else weight * powers[d][jd]
            out += grid if weight is None else grid * weight
        return out.reshape(shape)


# ---------------------------------------------------------------------------
# near-identity maps
# ---------------------------------------------------------------------------


@dataclass
class NearIdentityMap:
    """``(theta, I) -> (theta + E(theta), (Id + F(theta)) I + G(theta))``.

    ``E`` and ``G`` have shape ``(n, box)``, ``F`` has shape ``(n, n, box)``
    (row index first).  ``alias_mass`` is the coefficient mass discarded when
    the map was fitted on a grid.
    """

    E: np.ndarray
    F: np.ndarray
    G: np.ndarray
    alias_mass: float = 0.0

    @classmethod
    def identity(cls, n: int, K: int) -> "NearIdentityMap":
        box = (2 * K + 1,) * n
        return cls(np.zeros((n,) + box, dtype=complex), np.zeros((n, n) + box, dtype=complex),
                   np.zeros((n,) + box, dtype=complex))

    @classmethod
    def from_stacked(cls, stacked: np.ndarray, n: int, alias_mass: float = 0.0) -> "NearIdentityMap":
        E = stacked[:n]
        F = stacked[n:n + n * n].reshape((n, n) + stacked.shape[1:])
        G = stacked[n + n * n:]
        return cls(E, F, G, alias_mass)

    @property
    def n(self) -> int:
        return self.E.shape[0]

    @property
    def K(self) -> int:
        return _box_order(self.E, self.n)

    def stacked(self) -> np.ndarray:
        n = self.n
        return np.concatenate([self.E, self.F.reshape((n * n,) + self.E.shape[1:]), self.G])

    def is_identity(self) -> bool:
        return not (self.E.any() or self.F.any() or self.G.any())

    def grid_values(self, N: int) -> tuple:
        n = self.n
        vals = coeffs_to_grid(self.stacked(), n, N)
        return vals[:n], vals[n:n + n * n].reshape((n, n) + vals.shape[1:]), vals[n + n * n:]

    def series(self) -> dict:
        n = self.n
        return {"E": [FourierTaylorSeries(self.E[a][None]) for a in range(n)],
                "F": [[FourierTaylorSeries(self.F[a, b][None]) for b in range(n)] for a in range(n)],
                "G": [FourierTaylorSeries(self.G[a][None]) for a in range(n)]}

    def apply(self, thetas, actions=None) -> tuple[np.ndarray, np.ndarray]:
        """Images of points ``(P, n)``; returns new angles (not reduced) and actions."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        n = self.n
        actions = np.zeros_like(thetas) if actions is None else np.atleast_2d(np.asarray(actions, dtype=float))
        vals = evaluate_at_points(self.stacked(), n, thetas)
        E = vals[:n].T
        F = vals[n:n + n * n].reshape(n, n, -1).transpose(2, 0, 1)
        G = vals[n + n * n:].T
        return thetas + E, actions + np.einsum("pab,pb->pa", F, actions) + G

    def jacobian_determinant(self, thetas) -> np.ndarray:
        """``det(Id + grad E) det(Id + F)``, the Jacobian determinant in ``(theta, I)``."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        n, K = self.n, self.K
        fac = [derivative_factors(n, K, [1 if i == a else 0 for i in range(n)]) for a in range(n)]
        dE = np.stack([self.E[b] * fac[a] for b in range(n) for a in range(n)])
        vals = evaluate_at_points(np.concatenate([dE, self.F.reshape((n * n,) + self.E.shape[1:])]), n, thetas)
        P = thetas.shape[0]
        JE = vals[: n * n].reshape(n, n, P).transpose(2, 0, 1) + np.eye(n)
        JF = vals[n * n:].reshape(n, n, P).transpose(2, 0, 1) + np.eye(n)
        return np.linalg.det(JE) * np.linalg.det(JF)

    def norms(self, params: GevreyParams) -> dict:
        n = self.n
        return {"E": vector_norm(self.E, n, params),
                "F": vector_norm(self.F.reshape((n * n,) + self.E.shape[1:]), n, params),
                "G": vector_norm(self.G, n, params)}

    def to_dict(self) -> dict:
        return {name: [s.to_dict() for s in comps] if name != "F" else [[s.to_dict() for s in row] for row in comps]
                for name, comps in self.series().items()}


def _refit_map(E: np.ndarray, F: np.ndarray, G: np.ndarray, K: int) -> NearIdentityMap:
    n = E.shape[0]
    stacked = np.concatenate([E, F.reshape((n * n,) + E.shape[1:]), G])
    box, mass = grid_to_coeffs(stacked, n, K)
    return NearIdentityMap.from_stacked(hermitian_part(box, n), n, mass)


def _compose_grids(outer: NearIdentityMap, inner: tuple, N: int) -> tuple:
    """Grid values of ``outer o inner`` where ``inner`` is given by grid values."""
    Ei, Fi, Gi = inner
    n = outer.n
    shift = float(np.abs(Ei).max(initial=0.0))
    if outer.is_identity():
        return Ei, Fi, Gi
    vals = _ShiftEvaluator(outer.stacked(), n, N, shift)(Ei)
    Eo = vals[:n]
    Fo = vals[n:n + n * n].reshape((n, n) + vals.shape[1:])
    Go = vals[n + n * n:]
    E = Ei + Eo
    F = Fi + Fo + np.einsum("ab...,bc...->ac...", Fo, Fi)
    G = Gi + Go + np.einsum("ab...,b...->a...", Fo, Gi)
    return E, F, G


def compose_maps(outer: NearIdentityMap, inner: NearIdentityMap, N: int | None = None) -> NearIdentityMap:
    """``outer o inner`` refitted on a grid of ``N`` points per angle."""
    K = max(outer.K, inner.K)
    N = 4 * K + 4 if N is None else N
    E, F, G = _compose_grids(outer, inner.grid_values(N), N)
    out = _refit_map(E, F, G, K)
    out.alias_mass += outer.alias_mass + inner.alias_mass
    return out


# ---------------------------------------------------------------------------
# cohomological equation and flows
# ---------------------------------------------------------------------------


def _direction_and_denominator(v) -> tuple[np.ndarray, int]:
    w = integer_direction(v)
    q = int(getattr(v, "q", w[0]))
    if q < 1:
        raise ValueError("the direction needs a positive denominator")
    return w, q


def _solve_boxes(boxes: np.ndarray, n: int, w: np.ndarray, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Mode formula ``c_k / (2 pi i k.v)`` off the resonant modes; returns (solution, average)."""
    K = _box_order(boxes, n)
    dot = np.tensordot(w.astype(float), mode_vectors(n, K).astype(float), axes=(0, 0))
    resonant = resonant_mode_mask(n, K, w)
    averaged = np.where(resonant, boxes, 0.0)
    denom = np.where(resonant, 1.0, 1j * TWO_PI * dot / q)
    solution = np.where(resonant, 0.0, boxes / denom)
    return solution, averaged


def cohomological_solve(A: FourierTaylorSeries, v, e: float = 0.0) -> FourierTaylorSeries:
    """Solve ``{C, e + v.I} = A - [A]_v`` with ``C`` free of resonant modes.

    Mode ``k`` of ``C`` is ``a_k / (2 pi i k.v)`` when ``k.(q v) != 0`` and zero
    otherwise.  The bracket identity is checked on the output.
    """
    w, q = _direction_and_denominator(v)
    if w.shape != (A.n,):
        raise ValueError("direction dimension mismatch")
    sol, _ = _solve_boxes(A.coeffs, A.n, w, q)
    C = FourierTaylorSeries(sol)
    N = FourierTaylorSeries.from_terms(A.n, 0, 1, [((0,) * A.n, (0,) * A.n, e, 0.0)] + [
        ((0,) * A.n, tuple(1 if i == a else 0 for i in range(A.n)), w[a] / q, 0.0) for a in range(A.n)])
    lhs = poisson_bracket(C, N, A.K)
    rhs = add_scale(A, average_along(A, w), 1.0, -1.0)
    diff = add_scale(lhs, rhs, 1.0, -1.0)
    scale = max(1.0, A.l1_mass())
    if float(np.abs(diff.coeffs).max(initial=0.0)) > BRACKET_TOL * scale:
        raise ArithmeticError("cohomological equation residual above tolerance")
    return C


@dataclass
class FlowResult:
    """Time-``t`` map of ``X = C + D.I`` with integration diagnostics."""

    map: NearIdentityMap
    t: float
    steps: int
    picard_residual: float
    smallness_ratio: float | None
    grids: tuple | None = None


def _flow_fields(C: np.ndarray, D: np.ndarray, n: int) -> np.ndarray:
    """Stack ``D_b``, ``d_a D_b`` (index ``b n + a``) and ``d_a C``."""
    K = _box_order(C, n)
    fac = [derivative_factors(n, K, [1 if i == a else 0 for i in range(n)]) for a in range(n)]
    rows = [D[b] for b in range(n)]
    rows += [D[b] * fac[a] for b in range(n) for a in range(n)]
    rows += [C * fac[a] for a in range(n)]
    return np.stack(rows)


def _integrate_flow(C: np.ndarray, D: np.ndarray, t: float, N: int, K_out: int) -> tuple:
    """Grid values of ``E_t, F_t, G_t`` and the Picard residual of ``E_t``."""
    n = D.shape[0]
    shape = (N,) * n
    if not D.any():
        # the angles do not move, so the action equation integrates in closed form
        K = _box_order(C, n)
        grad = np.stack([C * derivative_factors(n, K, [1 if i == a else 0 for i in range(n)]) for a in range(n)])
        G = -t * coeffs_to_grid(grad, n, N) if C.any() else np.zeros((n,) + shape)
        return np.zeros((n,) + shape), np.zeros((n, n) + shape), G, 0, 0.0
    fields = _flow_fields(C, D, n)
    sup_D = float(np.abs(D).reshape(n, -1).sum(axis=1).max())
    ev = _ShiftEvaluator(fields, n, N, t * sup_D * (1 + 1e-9))
    steps = max(1, math.ceil(FLOW_STEPS_PER_UNIT * t))
    dt = t / steps

    def rhs(E, F, G):
        vals = ev(E)
        Dv = vals[:n]
        J = vals[n:n + n * n].reshape((n, n) + shape)  # J[b, a] = d_a D_b
        gC = vals[n + n * n:]
        dF = -(np.swapaxes(J, 0, 1) + np.einsum("ba...,bc...->ac...", J, F))
        dG = -gC - np.einsum("ba...,b...->a...", J, G)
        return Dv, dF, dG

    E = np.zeros((n,) + shape)
    F = np.zeros((n, n) + shape)
    G = np.zeros((n,) + shape)
    samples = []
    for _ in range(steps):
        k1 = rhs(E, F, G)
        samples.append(k1[0])
        k2 = rhs(E + 0.5 * dt * k1[0], F + 0.5 * dt * k1[1], G + 0.5 * dt * k1[2])
        k3 = rhs(E + 0.5 * dt * k2[0], F + 0.5 * dt * k2[1], G + 0.5 * dt * k2[2])
        k4 = rhs(E + dt * k3[0], F + dt * k3[1], G + dt * k3[2])
        E = E + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        F = F + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        G = G + dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        if not (np.isfinite(E).all() and np.isfinite(F).all() and np.isfinite(G).all()):
            raise FlowError("flow integration produced non-finite values")
    samples.append(rhs(E, F, G)[0])
    integral = integrate.simpson(np.stack(samples), dx=dt, axis=0)
    picard = float(np.abs(E - integral).max())
    return E, F, G, steps, picard


def _split_hamiltonian(X) -> tuple[np.ndarray, np.ndarray, int]:
    if isinstance(X, FourierTaylorSeries):
        if X.dI > 1 and np.abs(X.coeffs[1 + X.n:]).max(initial=0.0) > 0:
            raise ValueError("the generating Hamiltonian must be affine in the actions")
        n = X.n
        C = X.coeffs[0]
        D = np.stack([X.coeffs[1 + a] if X.dI >= 1 else np.zeros_like(C) for a in range(n)])
        return C, D, n
    C_series, D_series = X
    n = C_series.n
    K = max([C_series.K] + [d.K for d in D_series])
    C = resize_box(C_series.coeffs[0], n, C_series.K, K)
    D = np.stack([resize_box(d.coeffs[0], n, d.K, K) for d in D_series])
    return C, D, n


def flow_map(X, t: float = 1.0, gevrey: GevreyParams | None = None, sigma: float | None = None,
             K_out: int | None = None, N: int | None = None, alias_budget: float = 1e-9) -> FlowResult:
    """Time-``t`` map of the Hamiltonian ``X = C(theta) + D(theta).I``.

    The angles follow ``theta' = D(theta)``, integrated by the classical
    fourth-order Runge-Kutta scheme with step at most ``1/64`` on the angle
    grid; ``F_t`` and ``G_t`` solve the affine equations
    ``I' = -grad C - (grad D)^T I`` along the same trajectories.

    Parameters
    ----------
    X : FourierTaylorSeries or (series, list of series)
        Action degree at most one, or the pair ``(C, [D_1..D_n])``.
    gevrey, sigma : optional
        When given, the ratio ``|D| / sigma**alpha`` is reported.
    """
    C, D, n = _split_hamiltonian(X)
    K = _box_order(C, n)
    K_out = K if K_out is None else K_out
    N = 4 * max(K, K_out) + 4 if N is None else N
    E, F, G, steps, picard = _integrate_flow(C, D, t, N, K_out)
    fmap = _refit_map(E, F, G, K_out)
    if fmap.alias_mass > alias_budget:
        raise FlowError(f"flow refit discarded {fmap.alias_mass:.3g} (budget {alias_budget:.3g})")
    ratio = None
    if gevrey is not None and sigma is not None:
        ratio = vector_norm(D, n, gevrey) / sigma**gevrey.alpha
    return FlowResult(fmap, t, steps, picard, ratio, (E, F, G))


# ---------------------------------------------------------------------------
# the KAM step
# ---------------------------------------------------------------------------


@dataclass
class NodeStep:
    """Normal-form computation at one frequency."""

    e: float
    A: np.ndarray
    B_linear: np.ndarray
    M: np.ndarray
    stage_maps: list
    composite: NearIdentityMap
    composite_grids: tuple
    picard_residual: float
    alias_mass: float
    D_norm_max: float


def _node_step(e: float, A: np.ndarray, B: np.ndarray, M: np.ndarray, w: np.ndarray, directions: list,
               K: int, N: int, alias_budget: float, params: GevreyParams) -> NodeStep:
    n = w.shape[0]
    A_j, B_j = A, B
    flows = []
    picard = 0.0
    D_norm = 0.0
    for direction, q in directions:
        C, A_next = _solve_boxes(A_j, n, direction, q)
        D, B_next = _solve_boxes(B_j, n, direction, q)
        if C.any() or D.any():
            D_norm = max(D_norm, vector_norm(D, n, params))
            E_g, F_g, G_g, _, res = _integrate_flow(C, D, 1.0, N, K)
            picard = max(picard, res)
            fmap = _refit_map(E_g, F_g, G_g, K)
            if fmap.alias_mass > alias_budget:
                raise FlowError(f"stage flow refit discarded {fmap.alias_mass:.3g} (budget {alias_budget:.3g})")
            flows.append((fmap, (E_g, F_g, G_g)))
        else:
            flows.append((NearIdentityMap.identity(n, K), None))
        A_j, B_j = A_next, B_next
    # Phi = X_1 o X_2 o ... o X_n: the last stage acts first
    shape = (N,) * n
    grids = None
    for fmap, g in reversed(flows):
        if grids is None:
            grids = g if g is not None else (np.zeros((n,) + shape), np.zeros((n, n) + shape),
                                             np.zeros((n,) + shape))
        else:
            grids = _compose_grids(fmap, grids, N)
    E, F, G = grids
    composite = _refit_map(E, F, G, K)
    # H o Phi with the large parts removed analytically
    fields = np.concatenate([A[None], B, M.reshape((n * n,) + A.shape)])
    shift = float(np.abs(E).max(initial=0.0))
    vals = _ShiftEvaluator(fields, n, N, shift)(E)
    A1 = vals[0]
    B1 = vals[1:1 + n]
    M1 = vals[1 + n:].reshape((n, n) + shape)
    MG = np.einsum("ab...,b...->a...", M1, G)
    A_new = np.einsum("a,a...->...", w, G) + A1 + np.einsum("a...,a...->...", B1, G) \
        + np.einsum("a...,a...->...", G, MG)
    inner = B1 + 2.0 * MG
    B_lin = np.einsum("ac...,a->c...", F, w) + inner + np.einsum("ac...,a...->c...", F, inner)
    IdF = F + np.eye(n).reshape((n, n) + (1,) * n)
    M_new = np.einsum("ac...,ab...,bd...->cd...", IdF, M1, IdF)
    M_new = 0.5 * (M_new + np.swapaxes(M_new, 0, 1))
    a_box, a_mass = grid_to_coeffs(A_new, n, K)
    b_box, b_mass = grid_to_coeffs(B_lin, n, K)
    m_box, m_mass = grid_to_coeffs(M_new, n, K)
    a_box, b_box, m_box = hermitian_part(a_box, n), hermitian_part(b_box, n), hermitian_part(m_box, n)
    center = (K,) * n
    e_new = e + float(a_box[center].real)
    a_box[center] = 0.0
    alias = a_mass + b_mass + m_mass + composite.alias_mass + sum(f.alias_mass for f, _ in flows)
    return NodeStep(e_new, a_box, b_box, m_box, [f for f, _ in flows], composite, grids, picard, alias, D_norm)


@dataclass
class StepCondition:
    name: str
    lhs: float
    rhs: float
    kind: str  # "explicit" or "implicit"

    @property
    def ratio(self) -> float:
        if self.rhs == 0.0:
            return 0.0 if self.lhs == 0.0 else math.inf
        return self.lhs / self.rhs

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs * (1 + 1e-12) + 1e-300

    def to_dict(self) -> dict:
        return {"inequality": self.name, "lhs": self.lhs, "rhs": self.rhs, "ratio": self.ratio,
                "kind": self.kind, "holds": self.holds}


def step_conditions(eps: float, mu: float, h: float, r: float, Q: float, psi_Q: float, sigma: float,
                    delta: float, eta: float, alpha: float, constants: dict | None = None) -> list[StepCondition]:
    """The step inequalities; implicit ones use the explicit constants of ``constants``."""
    c = {**DEFAULT_CONSTANTS, **(constants or {})}
    QP = Q * psi_Q
    return [
        StepCondition("sqrt(epsilon) <= mu", math.sqrt(eps), mu, "explicit"),
        StepCondition("mu <= h/2", mu, h / 2.0, "explicit"),
        StepCondition("sqrt(epsilon) <= r", math.sqrt(eps), r, "explicit"),
        StepCondition("h <= c_h/(Q Psi(Q))", h, c["h"] / QP, "implicit"),
        StepCondition("r mu <= c_r delta/(Q Psi(Q))", r * mu, c["r"] * delta / QP, "implicit"),
        StepCondition("(1+eta) <= c_eta Q sigma^alpha", 1.0 + eta, c["eta"] * Q * sigma**alpha, "implicit"),
    ]


def _psi_at(omega0: Sequence[float], Q: float) -> float:
    if Q <= 200:
        return float(psi_of(omega0, Q).value)
    if len(omega0) == 2:
        table, _ = psi_cf_table(omega0[1], int(math.floor(Q)))
        return float(table[-1])
    return math.nan


@dataclass
class KamTransformation:
    """One step: maps at the new nodes and the frequency change.

    ``maps[p]`` is computed at the frequency ``preimages[p]``, the point sent
    by ``phi(w) = w + [B](w)`` to the new node ``targets[p]``.
    """

    maps: list
    stage_maps: list
    preimages: np.ndarray
    targets: np.ndarray
    phi_values: np.ndarray
    nodes_in: NodeGrid
    nodes_out: NodeGrid

    def phi(self, w, mean_B_nodes: np.ndarray) -> np.ndarray:
        return np.asarray(w, dtype=float) + self.nodes_in.interpolate(mean_B_nodes, w)


@dataclass
class StepDiagnostics:
    step: int
    Q: float
    psi_Q: float
    sigma: float
    delta: float
    s_in: float
    s_out: float
    epsilon: float
    mu: float
    eta: float
    basis: dict
    norm_A_in: float
    norm_B_in: float
    norm_A_out: float
    norm_B_out: float
    norm_A_out_center: float
    norm_B_out_center: float
    targets_met: bool
    kappa_A: float
    kappa_B: float
    conditions: list
    symplectic_defect: float
    picard_residual: float
    flow_smallness_ratio: float
    phi_inversion_residual: float
    phi_inverse_shift: float
    phi_shift: float
    alias_mass: float
    measured_constants: dict
    seconds: float
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["conditions"] = [c.to_dict() for c in self.conditions]
        return out


def _contraction(a_out: float, a_in: float, b_out: float, b_in: float) -> tuple[float, float]:
    kappa_A = a_out / a_in if a_in > 0 else 0.0
    b_scale = max(b_in, math.sqrt(a_in))
    kappa_B = b_out / b_scale if b_scale > 0 else 0.0
    return kappa_A, kappa_B


def _invert_phi(nodes: NodeGrid, mean_B: np.ndarray, targets: np.ndarray, tol: float = 1e-16,
                max_iter: int = 200) -> tuple[np.ndarray, float]:
    """Picard iteration ``y = x - [B](y)`` for every target ``x``."""
    out = np.empty_like(targets)
    worst = 0.0
    for p, x in enumerate(targets):
        y = x.copy()
        for _ in range(max_iter):
            y_new = x - nodes.interpolate(mean_B, y)
            change = float(np.abs(y_new - y).max())
            y = y_new
            if change <= tol * max(1.0, float(np.abs(x).max())):
                break
        out[p] = y
        worst = max(worst, float(np.abs(y + nodes.interpolate(mean_B, y) - x).max()))
    return out, worst


def kam_step(H: ParamHamiltonian, Q: float, sigma: float, delta: float, *, epsilon: float | None = None,
             mu: float | None = None, eta: float | None = None, basis: ApproxBasis | None = None,
             psi_Q: float | None = None, constants: dict | None = None, N: int | None = None,
             alias_budget: float = 1e-9, seed: int = 0, step_index: int = 0, samples: int = 100):
    """One KAM step on the frequency ball of ``H``.

    Parameters
    ----------
    H : ParamHamiltonian
    Q : float
        Approximation parameter for the rational basis of the centre frequency.
    sigma, delta : float
        Losses of Gevrey width and action radius.
    epsilon, mu, eta : float, optional
        Bounds on ``|A|``, ``|B|`` and the action Hessian; measured when omitted.

    Returns
    -------
    (ParamHamiltonian, KamTransformation, StepDiagnostics)

    Raises
    ------
    KamPreconditionError
        If an explicit inequality fails (the measured norms must also respect
        the given bounds).
    """
    start = time.perf_counter()
    params = H.gevrey
    n, K = H.n, H.K
    N = 4 * K + 4 if N is None else N
    if sigma <= 0 or sigma >= params.s:
        raise ValueError("sigma must lie in (0, s)")
    if not 0 < delta < H.r:
        raise ValueError("delta must lie in (0, r)")
    omega0 = np.asarray(H.nodes.center)
    norms_in = H.norms(params)
    a_in, b_in = norms_in["A_max"], norms_in["B_max"]
    eps = a_in if epsilon is None else float(epsilon)
    mu_v = max(b_in, math.sqrt(eps)) if mu is None else float(mu)
    eta_v = H.eta(params) if eta is None else float(eta)
    for name, lhs, rhs in (("|A|_{alpha,s} <= epsilon", a_in, eps), ("|B|_{alpha,s} <= mu", b_in, mu_v)):
        if lhs > rhs * (1 + 1e-9):
            raise KamPreconditionError(name, lhs, rhs, step_index)
    psi_Q = _psi_at(tuple(omega0), Q) if psi_Q is None else psi_Q
    conds = step_conditions(eps, mu_v, H.h, H.r, Q, psi_Q, sigma, delta, eta_v, params.alpha, constants)
    for c in conds:
        if c.kind == "explicit" and not c.holds:
            raise KamPreconditionError(c.name, c.lhs, c.rhs, step_index)
    if basis is None:
        basis = simultaneous_approx(tuple(omega0), Q)
    directions = [(np.asarray(v.integer_vector, dtype=np.int64), v.q) for v in basis.vectors]
    mean_B = H.mean_B()
    nodes_out = H.nodes.shrink(0.5)
    targets = nodes_out.points
    preimages, inv_res = _invert_phi(H.nodes, mean_B, targets)
    P = nodes_out.size
    e_out = np.zeros(P)
    A_out = np.zeros_like(H.A)
    B_out = np.zeros_like(H.B)
    M_out = np.zeros_like(H.M)
    maps, stages = [], []
    picard, alias, d_norm = 0.0, 0.0, 0.0
    rng = np.random.default_rng([seed, step_index])
    sample_thetas = rng.random((samples, n))
    defect = 0.0
    center = (K,) * n
    for p, y in enumerate(preimages):
        e_y, A_y, B_y, M_y = H.interpolate(y)
        res = _node_step(e_y, A_y, B_y, M_y, y, directions, K, N, alias_budget, params)
        bracket_B = H.nodes.interpolate(mean_B, y)
        e_out[p] = res.e
        A_out[p] = res.A
        B_out[p] = res.B_linear
        B_out[p][(slice(None),) + center] -= bracket_B
        # the node frequency equals y + [B](y) up to the inversion residual
        B_out[p][(slice(None),) + center] += y + bracket_B - targets[p]
        M_out[p] = res.M
        maps.append(res.composite)
        stages.append(res.stage_maps)
        picard = max(picard, res.picard_residual)
        alias = max(alias, res.alias_mass)
        d_norm = max(d_norm, res.D_norm_max)
        for fmap in res.stage_maps + [res.composite]:
            if not fmap.is_identity():
                defect = max(defect, float(np.abs(fmap.jacobian_determinant(sample_thetas) - 1.0).max()))
    params_out = params.with_width(params.s - sigma)
    H_out = H.with_nodes(nodes_out, e_out, A_out, B_out, M_out, H.r - delta, params_out)
    norms_out = H_out.norms(params_out)
    a_out, b_out = norms_out["A_max"], norms_out["B_max"]
    ci = nodes_out.center_index if nodes_out.degree % 2 else 0
    kappa_A, kappa_B = _contraction(a_out, a_in, b_out, b_in)
    targets_met = a_out <= eps / 16.0 and b_out <= mu_v / 4.0
    phi_values = preimages + np.stack([H.nodes.interpolate(mean_B, y) for y in preimages])
    phi_shift = float(np.abs(mean_B).max(initial=0.0))
    phi_inv_shift = float(np.abs(preimages - targets).max(initial=0.0))
    step = KamTransformation(maps, stages, preimages, targets, phi_values, H.nodes, nodes_out)
    map_norms = [m.norms(params_out) for m in maps]
    scale_E = psi_Q * mu_v
    scale_FG = sigma ** (-params.alpha) * psi_Q
    measured = {
        "E_over_psi_mu": max(m["E"] for m in map_norms) / scale_E if scale_E > 0 else 0.0,
        "F_over_sigma_psi_mu": max(m["F"] for m in map_norms) / (scale_FG * mu_v) if mu_v > 0 else 0.0,
        "G_over_sigma_psi_eps": max(m["G"] for m in map_norms) / (scale_FG * eps) if eps > 0 else 0.0,
        "phi_shift_over_mu": phi_shift / mu_v if mu_v > 0 else 0.0,
    }
    notes = []
    if not targets_met:
        msg = (f"step {step_index}: contraction targets missed (|A+|={a_out:.3g} vs {eps / 16:.3g}, "
               f"|B+|={b_out:.3g} vs {mu_v / 4:.3g})")
        notes.append(msg)
        warnings.warn(msg, KamWarning, stacklevel=2)
    for c in conds:
        if c.kind == "implicit" and not c.holds:
            notes.append(f"implicit inequality {c.name} has ratio {c.ratio:.3g} with the configured constant")
    diag = StepDiagnostics(
        step=step_index, Q=float(Q), psi_Q=float(psi_Q), sigma=float(sigma), delta=float(delta),
        s_in=params.s, s_out=params_out.s, epsilon=eps, mu=mu_v, eta=eta_v, basis=basis.to_dict(),
        norm_A_in=a_in, norm_B_in=b_in, norm_A_out=a_out, norm_B_out=b_out,
        norm_A_out_center=norms_out["A"][ci], norm_B_out_center=norms_out["B"][ci],
        targets_met=targets_met, kappa_A=kappa_A, kappa_B=kappa_B, conditions=conds,
        symplectic_defect=defect, picard_residual=picard,
        flow_smallness_ratio=d_norm / sigma**params.alpha, phi_inversion_residual=inv_res,
        phi_inverse_shift=phi_inv_shift, phi_shift=phi_shift, alias_mass=alias, measured_constants=measured,
        seconds=time.perf_counter() - start, warnings=notes)
    return H_out, step, diag


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass
class KamSchedule:
    """Geometric sequences driving the iteration.

    ``eps_i = 16**-i eps``, ``mu_i = 4**-i mu``, ``delta_i = 2**(-i-2) r``,
    ``h_i = 2**-i h``, ``Delta_i = 2**i Delta(Q0)``, ``Q_i = Delta^-1(Delta_i)``
    and ``sigma_i = C (1 + eta)**(1/alpha) Q_i**(-1/alpha)``.
    """

    epsilon: float
    mu: float
    r: float
    h: float
    alpha: float
    s: float
    Q0: float
    envelope: Envelope
    C: float = 1.0
    eta: float = 0.0
    _Q_cache: dict = field(default_factory=dict, repr=False)

    @property
    def sigma_constant(self) -> float:
        return self.C * (1.0 + self.eta) ** (1.0 / self.alpha)

    def eps_i(self, i: int) -> float:
        return 16.0**-i * self.epsilon

    def mu_i(self, i: int) -> float:
        return 4.0**-i * self.mu

    def delta_i(self, i: int) -> float:
        return 2.0 ** (-i - 2) * self.r

    def h_i(self, i: int) -> float:
        return 2.0**-i * self.h

    def Delta_i(self, i: int) -> float:
        return 2.0**i * float(self.envelope.delta(self.Q0))

    def Q_i(self, i: int) -> float:
        if i == 0:
            return float(self.Q0)
        if i not in self._Q_cache:
            self._Q_cache[i] = self.envelope.delta_inv(self.Delta_i(i))
        return self._Q_cache[i]

    def psi(self, Q: float) -> float:
        return self.envelope.psi_scalar(Q)

    def sigma_i(self, i: int) -> float:
        return self.sigma_constant * self.Q_i(i) ** (-1.0 / self.alpha)

    def s_i(self, i: int) -> float:
        return self.s - sum(self.sigma_i(j) for j in range(i))

    def r_i(self, i: int) -> float:
        return self.r - sum(self.delta_i(j) for j in range(i))

    def series_bounds(self, count: int) -> list[dict]:
        """Partial sums of the convergent series of the limit argument and their closed-form bounds."""
        a = self.alpha
        Q0, P0 = float(self.Q0), self.psi(self.Q0)
        terms = {"sum sigma_i^-alpha mu_i <= 2 Q0 mu": ([], 2 * Q0 * self.mu),
                 "sum mu_i <= 2 mu": ([], 2 * self.mu),
                 "sum sigma_i^-alpha Psi(Q_i) mu_i <= 2 Q0 Psi(Q0) mu": ([], 2 * Q0 * P0 * self.mu),
                 "sum Psi(Q_i) mu_i <= 2 Psi(Q0) mu": ([], 2 * P0 * self.mu),
                 "sum sigma_i^-alpha Psi(Q_i) eps_i <= 2 Q0 Psi(Q0) eps": ([], 2 * Q0 * P0 * self.epsilon),
                 "sum sigma_i <= s/2": ([], self.s / 2),
                 "sum delta_i = r/2 (1 - 2^-N)": ([], self.r / 2 * (1 - 2.0**-count))}
        keys = list(terms)
        for i in range(count):
            Qi = self.Q_i(i)
            Pi = self.psi(Qi)
            inv = self.sigma_i(i) ** (-a)
            vals = [inv * self.mu_i(i), self.mu_i(i), inv * Pi * self.mu_i(i), Pi * self.mu_i(i),
                    inv * Pi * self.eps_i(i), self.sigma_i(i), self.delta_i(i)]
            for k, v in zip(keys, vals):
                terms[k][0].append(v)
        return [{"series": k, "partial_sum": float(sum(v)), "bound": float(b)} for k, (v, b) in terms.items()]

    def to_dict(self, count: int) -> dict:
        return {"epsilon": self.epsilon, "mu": self.mu, "r": self.r, "h": self.h, "alpha": self.alpha,
                "s": self.s, "Q0": self.Q0, "C": self.C, "eta": self.eta, "sigma_constant": self.sigma_constant,
                "steps": [{"i": i, "eps": self.eps_i(i), "mu": self.mu_i(i), "delta": self.delta_i(i),
                           "h": self.h_i(i), "Delta": self.Delta_i(i), "Q": self.Q_i(i),
                           "sigma": self.sigma_i(i), "s": self.s_i(i), "r": self.r_i(i)} for i in range(count)]}


# ---------------------------------------------------------------------------
# iteration
# ---------------------------------------------------------------------------


@dataclass
class KamConfig:
    """Solver settings; ``epsilon``, ``mu`` and ``eta`` default to measured values."""

    alpha: float = 1.0
    s: float = 0.1
    r: float = 0.02
    h: float = 0.025
    epsilon: float | None = None
    mu: float | None = None
    eta: float | None = None
    K: int = 12
    N: int | None = None
    max_steps: int = 20
    residual_floor: float = 1e-12
    constants: dict = field(default_factory=dict)
    alias_budget: float = 1e-9
    seed: int = 0
    Q0: int | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "KamConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known - {"n"}
        if unknown:
            raise ValueError(f"unknown solver settings: {sorted(unknown)}")
        cfg = cls(**{k: v for k, v in data.items() if k in known})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        for name in ("s", "r", "h"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.K < 1 or self.max_steps < 0:
            raise ValueError("K must be positive and max_steps non-negative")
        for name in ("epsilon", "mu", "eta"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class KamResult:
    """Outcome of the iteration at the centre frequency ``omega0``."""

    omega0: np.ndarray
    omega_star: np.ndarray
    e_star: float
    embedding: NearIdentityMap
    residual: dict
    history: list
    converged: bool
    partial: bool
    failure: dict | None
    steps: int
    schedule: dict
    Q0: dict
    wiring: dict
    final: ParamHamiltonian
    transformations: list = field(default_factory=list, repr=False)
    accumulated: list = field(default_factory=list, repr=False)
    original_parameters: list = field(default_factory=list, repr=False)
    seconds: float = 0.0

    @property
    def n(self) -> int:
        return self.omega0.shape[0]

    def embed(self, thetas) -> tuple[np.ndarray, np.ndarray]:
        """``Theta(theta) = (theta + E*(theta), G*(theta))``."""
        return self.embedding.apply(thetas)

    @property
    def frequency_shift(self) -> float:
        return float(np.abs(self.omega_star - self.omega0).max())

    def to_dict(self) -> dict:
        mu = self.wiring.get("mu", 0.0)
        shift = self.frequency_shift
        return {
            "omega0": self.omega0.tolist(), "omega_star": self.omega_star.tolist(), "e_star": self.e_star,
            "frequency_shift": shift, "c3_measured": shift / mu if mu else 0.0,
            "residual": self.residual, "converged": self.converged, "partial": self.partial,
            "failure": self.failure, "steps": self.steps, "Q0": self.Q0, "wiring": self.wiring,
            "schedule": self.schedule, "history": self.history,
            "embedding_alias_mass": self.embedding.alias_mass, "seconds": self.seconds,
        }

    def to_json(self) -> str:
        return dumps_canonical(self.to_dict())

    def torus_csv(self, N: int = 32) -> str:
        """Embedded points of a regular angle grid."""
        n = self.n
        thetas = grid_points(n, N).reshape(n, -1).T
        th, I = self.embed(thetas)
        head = [f"theta{i + 1}" for i in range(n)] + [f"x{i + 1}" for i in range(n)] + [f"I{i + 1}" for i in range(n)]
        rows = [",".join(head)]
        for a, b, c in zip(thetas, th, I):
            rows.append(",".join(repr(float(v)) for v in (*a, *b, *c)))
        return "\n".join(rows) + "\n"

    def history_csv(self) -> str:
        cols = ["step", "Q", "sigma", "s_out", "norm_A_in", "norm_B_in", "norm_A_out", "norm_B_out",
                "kappa_A", "kappa_B", "targets_met", "symplectic_defect", "seconds"]
        rows = [",".join(cols)]
        for h in self.history:
            rows.append(",".join(str(h[c]) for c in cols))
        return "\n".join(rows) + "\n"


def _interp_map(nodes: NodeGrid, maps: list, w) -> NearIdentityMap:
    stacked = np.stack([m.stacked() for m in maps])
    n = nodes.n
    return NearIdentityMap.from_stacked(nodes.interpolate(stacked, w), n,
                                        max(m.alias_mass for m in maps))


def kam_iterate(H0: ParamHamiltonian, profile: FrequencyProfile, config: KamConfig) -> KamResult:
    """Iterate KAM steps along the schedule until the residual floor.

    Raises
    ------
    KamPreconditionError
        If the run conditions ``sqrt(eps) <= mu <= h/2`` and ``sqrt(eps) <= r``
        (or the measured bounds ``|A| <= eps``, ``|B| <= mu``) fail at the start.
    Q0Unsatisfiable
        If no admissible ``Q0`` exists within the profile horizon.
    """
    start = time.perf_counter()
    config.validate()
    constants = {**DEFAULT_CONSTANTS, **config.constants}
    n = H0.n
    params = GevreyParams(config.alpha, config.s)
    nodes0 = NodeGrid(H0.nodes.center, config.h, H0.nodes.degree)
    if np.abs(nodes0.points - H0.nodes.points).max() > 1e-14:
        raise ValueError("the Hamiltonian nodes do not match the configured ball radius h")
    H = ParamHamiltonian(nodes0, H0.e, H0.A, H0.B, H0.M, config.r, params, dict(H0.metadata))
    norms0 = H.norms(params)
    a0, b0 = norms0["A_max"], norms0["B_max"]
    eps = a0 if config.epsilon is None else float(config.epsilon)
    mu = max(b0, math.sqrt(eps)) if config.mu is None else float(config.mu)
    eta = H.eta(params) if config.eta is None else float(config.eta)
    wiring = {"epsilon": eps, "mu": mu, "eta": eta, "measured_A": a0, "measured_B": b0,
              "epsilon_source": "measured" if config.epsilon is None else "config",
              "mu_source": "measured" if config.mu is None else "config",
              "eta_source": "measured" if config.eta is None else "config"}
    run_conditions = [("|A|_{alpha,s} <= epsilon", a0, eps), ("|B|_{alpha,s} <= mu", b0, mu),
                      ("sqrt(epsilon) <= mu", math.sqrt(eps), mu), ("mu <= h/2", mu, config.h / 2),
                      ("sqrt(epsilon) <= r", math.sqrt(eps), config.r)]
    for name, lhs, rhs in run_conditions:
        if lhs > rhs * (1 + 1e-9):
            raise KamPreconditionError(name, lhs, rhs)
    omega0 = np.asarray(nodes0.center)
    if config.Q0 is not None:
        Q0 = int(config.Q0)
        q0_info = {"Q0": Q0, "source": "config"}
    else:
        choice = select_Q0(profile, config.alpha, config.s, eta, constants["C"])
        Q0 = choice.Q0
        q0_info = {"Q0": Q0, "source": "selected", "lhs": choice.lhs, "rhs": choice.rhs}
    env = Envelope(profile)
    sched = KamSchedule(eps, mu, config.r, config.h, config.alpha, config.s, Q0, env, constants["C"], eta)
    psi0 = sched.psi(Q0)
    q0_info["Psi(Q0)"] = psi0
    q0_info["h Q0 Psi(Q0)"] = config.h * Q0 * psi0
    ci = nodes0.center_index
    accumulated = [NearIdentityMap.identity(n, H.K) for _ in range(nodes0.size)]
    original = nodes0.points.copy()
    history, transformations, acc_history, orig_history = [], [], [accumulated], [original]
    converged = a0 <= config.residual_floor and b0 <= config.residual_floor
    failure = None
    steps = 0
    N = 4 * H.K + 4 if config.N is None else config.N
    while not converged and steps < config.max_steps:
        i = steps
        Q = sched.Q_i(i)
        try:
            if sched.s_i(i + 1) <= 0:
                raise KamPreconditionError("s_{i+1} > 0", sched.sigma_i(i), sched.s_i(i), i)
            basis = simultaneous_approx(tuple(omega0), Q)
            H_next, step, diag = kam_step(
                H, Q, sched.sigma_i(i), sched.delta_i(i), epsilon=sched.eps_i(i), mu=sched.mu_i(i), eta=eta,
                basis=basis, psi_Q=sched.psi(Q), constants=constants, N=N, alias_budget=config.alias_budget,
                seed=config.seed, step_index=i)
        except (KamPreconditionError, FlowError, AliasingError) as exc:
            failure = {"step": i, "error": type(exc).__name__, "message": str(exc),
                       "inequality": getattr(exc, "inequality", None)}
            break
        new_acc, new_orig = [], []
        for p, y in enumerate(step.preimages):
            outer = _interp_map(H.nodes, accumulated, y)
            grids = step.maps[p].grid_values(N)
            E, F, G = _compose_grids(outer, grids, N)
            acc = _refit_map(E, F, G, H.K)
            acc.alias_mass += outer.alias_mass + step.maps[p].alias_mass
            new_acc.append(acc)
            new_orig.append(H.nodes.interpolate(original, y))
        accumulated, original = new_acc, np.array(new_orig)
        acc_history.append(accumulated)
        orig_history.append(original)
        transformations.append(step)
        history.append(diag.to_dict())
        H = H_next
        steps += 1
        converged = diag.norm_A_out <= config.residual_floor and diag.norm_B_out <= config.residual_floor
    norms = H.norms(H.gevrey)
    residual = {"A": norms["A_max"], "B": norms["B_max"], "A_center": norms["A"][ci], "B_center": norms["B"][ci],
                "width": H.gevrey.s}
    return KamResult(
        omega0=omega0, omega_star=np.asarray(original[ci]), e_star=float(H.e[ci]), embedding=accumulated[ci],
        residual=residual, history=history, converged=converged, partial=not converged, failure=failure,
        steps=steps, schedule=sched.to_dict(max(steps, 1)), Q0=q0_info, wiring=wiring, final=H,
        transformations=transformations, accumulated=acc_history, original_parameters=orig_history,
        seconds=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# invariance checks
# ---------------------------------------------------------------------------


class _SparseField:
    """Modes of stacked coefficient boxes above ``drop_tol``, evaluated at arbitrary points."""

    def __init__(self, boxes: np.ndarray, n: int, drop_tol: float = 0.0):
        flat = boxes.reshape((-1,) + boxes.shape[boxes.ndim - n:])
        K = _box_order(flat, n)
        active = np.abs(flat).max(axis=0) > drop_tol
        k = mode_vectors(n, K)
        self.k = np.stack([k[d][active] for d in range(n)], axis=1).astype(float)  # (m, n)
        self.c = flat[:, active]  # (F, m)
        self.lead = boxes.shape[: boxes.ndim - n]

    def gradient(self, thetas: np.ndarray, index: int = 0) -> np.ndarray:
        """Gradient ``(P, n)`` of one field."""
        if self.k.shape[0] == 0:
            return np.zeros_like(thetas)
        phase = np.exp(1j * TWO_PI * thetas @ self.k.T)
        return np.real((phase * self.c[index]) @ (1j * TWO_PI * self.k))

    def values_and_gradients(self, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values ``(F, P)`` and gradients ``(F, n, P)``."""
        if self.k.shape[0] == 0:
            F = self.c.shape[0]
            return np.zeros((F, thetas.shape[0])), np.zeros((F, thetas.shape[1], thetas.shape[0]))
        phase = np.exp(1j * TWO_PI * thetas @ self.k.T)  # (P, m)
        vals = np.real(self.c @ phase.T)
        grads = np.real(np.einsum("fm,md,pm->fdp", self.c, 1j * TWO_PI * self.k, phase))
        return vals, grads


@dataclass
class InvarianceReport:
    norm_A: float
    norm_B: float
    dynamical: float
    T: float
    dt: float
    points: int
    integrator: str
    checkpoints: int
    seed: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _hamiltonian_at(H: ParamHamiltonian, w) -> tuple:
    e, A, B, M = H.interpolate(w)
    return A, B, M


def invariance_residual(result: KamResult, H_original: ParamHamiltonian, T: float = 100.0, dt: float = 1e-3,
                        points: int = 32, seed: int = 0, checkpoints: int = 1000,
                        separable_tol: float = 1e-13, mode_tol: float = 1e-15) -> InvarianceReport:
    """Algebraic and dynamical invariance of the computed torus.

    The original Hamiltonian at the frequency parameter ``omega*`` is
    integrated with a symplectic scheme (Stormer-Verlet when separable,
    implicit midpoint otherwise) from ``Theta(theta_0)`` for random
    ``theta_0``; the reported value is the largest distance to
    ``Theta(theta_0 + t omega0)`` over ``checkpoints`` equally spaced times.
    Oscillating action couplings with total coefficient mass below
    ``separable_tol`` (rounding left by grid refits) are dropped, as are
    single Fourier modes below ``mode_tol``.
    """
    n = result.n
    A, B, M = _hamiltonian_at(H_original, result.omega_star)
    w = np.asarray(result.omega_star, dtype=float)
    K = _box_order(A, n)
    center = (K,) * n
    rng = np.random.default_rng(seed)
    theta0 = rng.random((points, n))
    th, I = result.embed(theta0)
    # constant parts of B shift the frequency; only oscillating parts couple angles and actions
    w = w + B[(slice(None),) + center].real
    B = B.copy()
    B[(slice(None),) + center] = 0.0
    M_osc = M.copy()
    M_osc[(slice(None), slice(None)) + center] = 0.0
    separable = float(np.abs(B).sum() + np.abs(M_osc).sum()) <= separable_tol
    steps = int(round(T / dt))
    stride = max(1, steps // checkpoints)
    omega0 = result.omega0
    worst = 0.0

    def distance(theta, actions, t):
        ref_t, ref_I = result.embed(theta0 + t * omega0)
        d = (theta - ref_t + 0.5) % 1.0 - 0.5
        return max(float(np.abs(d).max()), float(np.abs(actions - ref_I).max()))

    if separable:
        field_A = _SparseField(A[None], n, mode_tol)
        M0 = M[(slice(None), slice(None)) + center].real
        grad = field_A.gradient(th)
        for step in range(1, steps + 1):
            I = I - 0.5 * dt * grad
            th = th + dt * (w + 2.0 * I @ M0.T)
            grad = field_A.gradient(th)
            I = I - 0.5 * dt * grad
            if step % stride == 0 or step == steps:
                worst = max(worst, distance(th, I, step * dt))
        integrator = "stormer-verlet"
    else:
        fields = _SparseField(np.concatenate([A[None], B, M.reshape((n * n,) + A.shape)]), n, mode_tol)

        def vector_field(theta, actions):
            vals, grads = fields.values_and_gradients(theta)
            Bv = vals[1:1 + n].T  # (P, n)
            Mv = vals[1 + n:].reshape(n, n, -1).transpose(2, 0, 1)
            gA = grads[0].T
            gB = grads[1:1 + n].transpose(2, 0, 1)  # (P, b, a) = d_a B_b
            gM = grads[1 + n:].reshape(n, n, n, -1).transpose(3, 0, 1, 2)  # (P, a, b, c) = d_c M_ab
            dtheta = w + Bv + 2.0 * np.einsum("pab,pb->pa", Mv, actions)
            dI = -gA - np.einsum("pba,pb->pa", gB, actions) - np.einsum("pabc,pa,pb->pc", gM, actions, actions)
            return dtheta, dI

        for step in range(1, steps + 1):
            t_new, I_new = th.copy(), I.copy()
            for _ in range(20):
                dth, dI = vector_field(0.5 * (th + t_new), 0.5 * (I + I_new))
                t_next, I_next = th + dt * dth, I + dt * dI
                change = max(float(np.abs(t_next - t_new).max()), float(np.abs(I_next - I_new).max()))
                t_new, I_new = t_next, I_next
                if change <= 1e-15:
                    break
            th, I = t_new, I_new
            if step % stride == 0 or step == steps:
                worst = max(worst, distance(th, I, step * dt))
        integrator = "implicit-midpoint"
    return InvarianceReport(result.residual["A"], result.residual["B"], worst, T, dt, points, integrator,
                            steps // stride, seed)
