import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from gevkam.arithmetic import GOLDEN, Envelope, build_profile
from gevkam.gevrey import GevreyParams, norm_trig_poly
from gevkam.hamiltonians import IntegrableSpec, expand_at_action
from gevkam.kam import (
    AliasingError,
    KamConfig,
    KamPreconditionError,
    KamSchedule,
    NearIdentityMap,
    NodeGrid,
    ParamHamiltonian,
    SampledHamiltonian,
    cohomological_solve,
    compose_maps,
    decompose,
    flow_map,
    invariance_residual,
    kam_iterate,
    kam_step,
)
from gevkam.rational_approx import RationalVector, basis_from_convergents, simultaneous_approx
from gevkam.series import (
    FourierTaylorSeries,
    evaluate_many,
    full_average,
    grid_points,
    multiply,
    partial_derivative,
    sample_grid,
)

from conftest import GOLDEN_CONFIG, run_config
from helpers import random_series

PARAMS = GevreyParams(1.0, 0.1)
FLOW_K = 12  # output order that keeps the flow refit within its budget
OMEGA = (1.0, GOLDEN)


def box(f: FourierTaylorSeries, K: int) -> np.ndarray:
    """``I**0`` block of ``f`` padded to order ``K``."""
    return f.with_truncation(K=K, dI=0).coeffs[0]


def hamiltonian_values(e, w, A, B, M, thetas, actions):
    """``e + w.I + A + B.I + I.M I`` at points, from coefficient boxes."""
    n = len(w)
    series = lambda c: FourierTaylorSeries(np.asarray(c)[None])
    out = e + actions @ np.asarray(w) + evaluate_many(series(A), thetas)
    for a in range(n):
        out = out + evaluate_many(series(B[a]), thetas) * actions[:, a]
        for b in range(n):
            out = out + evaluate_many(series(M[a, b]), thetas) * actions[:, a] * actions[:, b]
    return out


def quadratic_problem(A_terms=(), B_terms=None, K=6, h=0.025, r=0.02, s=0.1):
    """``w.I + A + B.I + |I|**2/2`` with node-independent ``A`` and ``B``."""
    nodes = NodeGrid(OMEGA, h)
    P = nodes.size
    n = 2
    shape = (2 * K + 1,) * n
    A = FourierTaylorSeries.from_terms(n, K, 0, list(A_terms)).coeffs[0]
    B = np.zeros((n,) + shape, dtype=complex)
    for a, terms in enumerate(B_terms or [[], []]):
        B[a] = FourierTaylorSeries.from_terms(n, K, 0, terms).coeffs[0]
    M = np.zeros((n, n) + shape, dtype=complex)
    M[0, 0][(K, K)] = M[1, 1][(K, K)] = 0.5
    return ParamHamiltonian(nodes, np.zeros(P), np.broadcast_to(A, (P,) + shape).copy(),
                            np.broadcast_to(B, (P, n) + shape).copy(), np.broadcast_to(M, (P, n, n) + shape).copy(),
                            r, GevreyParams(1.0, s))


# -- node grid ----------------------------------------------------------------

def test_node_grid_layout():
    g = NodeGrid(OMEGA, 0.1)
    assert g.size == 9
    np.testing.assert_array_equal(g.points[g.center_index], OMEGA)
    assert set(np.round(g.offsets, 15)) == {-1.0, 0.0, 1.0}
    assert g.shrink().radius == 0.05


def test_node_interpolation_exact_for_tensor_quadratics():
    g = NodeGrid((0.3, -0.2), 0.5)
    f = lambda w: 1 + 2 * w[0] - w[1] + 3 * w[0] * w[1] - w[0] ** 2 * w[1] ** 2
    values = np.array([f(p) for p in g.points])
    rng = np.random.default_rng(0)
    for w in rng.uniform(-0.2, 0.8, size=(10, 2)):
        assert g.interpolate(values, w) == pytest.approx(f(w), abs=1e-12)


# -- decompose ----------------------------------------------------------------

def linear_jets(nodes, N):
    return [{(1, 0): np.full((N, N), w[0]), (0, 1): np.full((N, N), w[1]), (0, 0): np.zeros((N, N))}
            for w in nodes.points]


def test_decompose_pure_frequency_term():
    nodes = NodeGrid(OMEGA, 0.025)
    H = decompose(SampledHamiltonian(linear_jets(nodes, 16)), nodes, 0.02, 0.025, 3, PARAMS)
    for arr in (H.e, H.A, H.B, H.M):
        assert np.abs(arr).max() < 1e-15


def test_decompose_quadratic_expansion():
    nodes = NodeGrid(OMEGA, 0.025)
    spec = IntegrableSpec("quadratic", 2)
    sampled, _ = expand_at_action(spec, FourierTaylorSeries.zeros(2, 0), 0.0, nodes, 16)
    H = decompose(sampled, nodes, 0.02, 0.025, 3, PARAMS)
    np.testing.assert_allclose(H.e, 0.5 * (nodes.points**2).sum(axis=1), atol=1e-15)
    assert np.abs(H.B).max() < 1e-15
    np.testing.assert_allclose(H.M[:, :, :, 3, 3].real, np.broadcast_to(0.5 * np.eye(2), (9, 2, 2)), atol=1e-15)


def test_decompose_zero_mean_perturbation():
    nodes = NodeGrid(OMEGA, 0.025)
    N, eps = 16, 1e-3
    x = grid_points(2, N)
    jets = linear_jets(nodes, N)
    for j in jets:
        j[(0, 0)] = eps * np.cos(2 * np.pi * x[0])
    H = decompose(SampledHamiltonian(jets), nodes, 0.02, 0.025, 3, PARAMS)
    assert np.abs(H.e).max() < 1e-18
    np.testing.assert_allclose(H.A[0], FourierTaylorSeries.trig((1, 0), cos=eps, K=3).coeffs[0], atol=1e-18)


def test_decompose_reconstructs_samples():
    nodes = NodeGrid(OMEGA, 0.025)
    K, N = 4, 20
    rng = np.random.default_rng(1)
    jets, truth = [], []
    for p, w in enumerate(nodes.points):
        f = random_series(100 + p, K=K, dI=2, terms=12, scale=0.1)
        f = f + FourierTaylorSeries.from_terms(2, 0, 1, [((0, 0), (1, 0), w[0], 0), ((0, 0), (0, 1), w[1], 0)])
        truth.append(f)
        jets.append({m: sample_grid(f, N, m) for m in f.monomials})
    H = decompose(SampledHamiltonian(jets), nodes, 0.02, 0.025, K, PARAMS)
    th = rng.random((40, 2))
    I = 0.1 * rng.normal(size=(40, 2))
    for p in range(nodes.size):
        assert np.abs(evaluate_many(H.A_series(p), th)).sum() >= 0
        np.testing.assert_allclose(evaluate_many(H.series_at(p), th, I), evaluate_many(truth[p], th, I), atol=1e-10)
        assert abs(full_average(H.A_series(p)).l1_mass()) < 1e-15


def test_decompose_aliasing_over_budget():
    nodes = NodeGrid(OMEGA, 0.025)
    N = 16
    x = grid_points(2, N)
    jets = linear_jets(nodes, N)
    for j in jets:
        j[(0, 0)] = 1e-3 * np.cos(2 * np.pi * 7 * x[0])
    with pytest.raises(AliasingError):
        decompose(SampledHamiltonian(jets), nodes, 0.02, 0.025, 3, PARAMS)


# -- cohomological equation ---------------------------------------------------

def integral_oracle(A: FourierTaylorSeries, w: np.ndarray, q: int, thetas: np.ndarray) -> np.ndarray:
    """``q int_0^1 (A - [A]_v)(theta + t q v) t dt`` by Gauss-Legendre quadrature."""
    x, wts = np.polynomial.legendre.leggauss(200)
    t = 0.5 * (x + 1)
    wts = 0.5 * wts
    avg = A.with_truncation()
    from gevkam.series import average_along
    rest = A - average_along(A, w)
    out = np.zeros(len(thetas))
    for ti, wi in zip(t, wts):
        out += wi * ti * evaluate_many(rest, thetas + ti * w[None, :])
    return q * out


def test_cohomological_orthogonal_modes_give_zero():
    A = FourierTaylorSeries.trig((1, -1), cos=1.0) + FourierTaylorSeries.trig((2, -2), sin=0.3)
    assert cohomological_solve(A, RationalVector((1,), 1)).l1_mass() == 0.0


def test_cohomological_single_mode():
    C = cohomological_solve(FourierTaylorSeries.trig((1, 0), cos=1.0), RationalVector((1,), 1))
    terms = C.terms(tol=1e-16)
    assert len(terms) == 1 and terms[0]["k"] == [1, 0]
    assert terms[0]["cos"] == pytest.approx(0.0, abs=1e-16)
    assert terms[0]["sin"] == pytest.approx(1 / (2 * np.pi), rel=1e-14)


@pytest.mark.parametrize("index", [1, 3, 5])
def test_cohomological_matches_integral_oracle(index):
    v = basis_from_convergents(GOLDEN, index).vectors[1]
    w = np.array(v.integer_vector)
    A = random_series(7 + index, K=3, terms=8)
    C = cohomological_solve(A, v)
    th = np.random.default_rng(index).random((30, 2))
    np.testing.assert_allclose(evaluate_many(C, th), integral_oracle(A, w, v.q, th), atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(0, 1))
def test_cohomological_norm_bound(seed, index, which):
    v = basis_from_convergents(GOLDEN, index).vectors[which]
    A = random_series(seed, K=4, terms=6)
    params = GevreyParams(1.0, 0.2)
    assert norm_trig_poly(cohomological_solve(A, v), params) <= v.q * norm_trig_poly(A, params) * (1 + 1e-12)


# -- flows --------------------------------------------------------------------

def test_flow_of_angle_only_hamiltonian_is_closed_form():
    C = random_series(30, K=4, terms=6, scale=0.01)
    t = 0.7
    out = flow_map((C, [FourierTaylorSeries.zeros(2, 4)] * 2), t)
    assert not out.map.E.any() and not out.map.F.any()
    for a in range(2):
        grad = partial_derivative(C, "theta", a)
        np.testing.assert_allclose(out.map.G[a], -t * grad.coeffs[0], atol=1e-15)


def test_flow_of_zero_is_identity():
    assert flow_map(FourierTaylorSeries.zeros(2, 3, 1)).map.is_identity()


def small_affine_hamiltonian(seed: int, K: int = 3):
    C = random_series(seed, K=K, terms=5, scale=1e-4)
    D = [random_series(seed + 1 + a, K=K, terms=4, scale=1e-4) for a in range(2)]
    return C, D


def hamilton_equations(C, D):
    dC = [partial_derivative(C, "theta", a) for a in range(2)]
    dD = [[partial_derivative(D[b], "theta", a) for a in range(2)] for b in range(2)]

    def rhs(_, y):
        th, I = y[:2][None], y[2:]
        dth = [evaluate_many(D[b], th)[0] for b in range(2)]
        dI = [-evaluate_many(dC[a], th)[0] - sum(evaluate_many(dD[b][a], th)[0] * I[b] for b in range(2))
              for a in range(2)]
        return np.array(dth + dI)

    return rhs


def test_flow_matches_direct_ode_integration():
    C, D = small_affine_hamiltonian(40)
    fmap = flow_map((C, D), 1.0, K_out=FLOW_K).map
    rng = np.random.default_rng(2)
    th = rng.random((5, 2))
    I = 0.01 * rng.normal(size=(5, 2))
    th1, I1 = fmap.apply(th, I)
    rhs = hamilton_equations(C, D)
    for j in range(5):
        sol = solve_ivp(rhs, (0, 1), np.concatenate([th[j], I[j]]), rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(th1[j], sol.y[:2, -1], atol=1e-10)
        np.testing.assert_allclose(I1[j], sol.y[2:, -1], atol=1e-10)


def numeric_jacobian(fmap: NearIdentityMap, th: np.ndarray, I: np.ndarray, h: float = 1e-6) -> np.ndarray:
    z = np.concatenate([th, I])
    J = np.zeros((4, 4))
    for c in range(4):
        dz = np.zeros(4)
        dz[c] = h
        plus = np.concatenate(fmap.apply((z + dz)[None, :2], (z + dz)[None, 2:]), axis=1)[0]
        minus = np.concatenate(fmap.apply((z - dz)[None, :2], (z - dz)[None, 2:]), axis=1)[0]
        J[:, c] = (plus - minus) / (2 * h)
    return J


def test_flow_is_symplectic():
    C, D = small_affine_hamiltonian(50)
    fmap = flow_map((C, D), 1.0, K_out=FLOW_K).map
    rng = np.random.default_rng(3)
    th = rng.random((100, 2))
    assert np.abs(fmap.jacobian_determinant(th) - 1).max() <= 1e-8
    omega = np.block([[np.zeros((2, 2)), np.eye(2)], [-np.eye(2), np.zeros((2, 2))]])
    for j in range(10):
        J = numeric_jacobian(fmap, th[j], 0.01 * rng.normal(size=2))
        np.testing.assert_allclose(J.T @ omega @ J, omega, atol=1e-8)


def test_flow_reports_smallness_ratio():
    C, D = small_affine_hamiltonian(60)
    out = flow_map((C, D), 1.0, gevrey=PARAMS, sigma=0.05, K_out=FLOW_K)
    assert out.smallness_ratio is not None and out.smallness_ratio > 0
    assert out.steps >= 64 and out.picard_residual < 1e-12


def test_composition_of_maps_matches_sequential_application():
    f1 = flow_map(small_affine_hamiltonian(70), 1.0, K_out=FLOW_K).map
    f2 = flow_map(small_affine_hamiltonian(80), 1.0, K_out=FLOW_K).map
    comp = compose_maps(f1, f2)
    rng = np.random.default_rng(4)
    th = rng.random((50, 2))
    I = 0.01 * rng.normal(size=(50, 2))
    seq = f1.apply(*f2.apply(th, I))
    direct = comp.apply(th, I)
    np.testing.assert_allclose(direct[0], seq[0], atol=1e-9)
    np.testing.assert_allclose(direct[1], seq[1], atol=1e-9)


# -- the step -----------------------------------------------------------------

def step_args(H, Q=20.0):
    return dict(epsilon=None, mu=None, basis=simultaneous_approx(OMEGA, Q))


def test_step_with_zero_perturbation_is_identity():
    H = quadratic_problem()
    H_out, step, diag = kam_step(H, 20.0, 0.01, 0.002, **step_args(H))
    assert all(m.is_identity() for m in step.maps)
    np.testing.assert_array_equal(step.preimages, step.targets)
    assert not H_out.A.any() and not H_out.B.any()
    np.testing.assert_allclose(H_out.M, H.M, atol=1e-15)
    assert diag.norm_A_out == 0.0 and diag.norm_B_out == 0.0


def test_step_with_constant_b_shifts_frequency():
    b = (3e-4, -2e-4)
    H = quadratic_problem(B_terms=[[((0, 0), None, b[0], 0.0)], [((0, 0), None, b[1], 0.0)]])
    H_out, step, diag = kam_step(H, 20.0, 0.01, 0.002, mu=0.01, epsilon=0.0, basis=simultaneous_approx(OMEGA, 20))
    assert all(m.is_identity() for m in step.maps)
    np.testing.assert_allclose(step.preimages, step.targets - np.array(b), atol=1e-17)
    np.testing.assert_allclose(step.phi_values, step.targets, atol=1e-17)
    assert diag.phi_inversion_residual <= 1e-16
    assert np.abs(H_out.B).max() < 1e-17


def test_step_rejects_violated_inequality():
    H = quadratic_problem(A_terms=[((1, 0), None, 1e-4, 0.0)])
    with pytest.raises(KamPreconditionError) as err:
        kam_step(H, 20.0, 0.01, 0.002, epsilon=1.0, mu=1.0, basis=simultaneous_approx(OMEGA, 20))
    assert err.value.inequality == "mu <= h/2"


def test_step_rejects_measured_norm_above_bound():
    H = quadratic_problem(A_terms=[((1, 0), None, 1e-4, 0.0)])
    with pytest.raises(KamPreconditionError) as err:
        kam_step(H, 20.0, 0.01, 0.002, epsilon=1e-9, mu=1e-4, basis=simultaneous_approx(OMEGA, 20))
    assert "epsilon" in err.value.inequality


@pytest.fixture(scope="module")
def single_mode_step():
    eps = 1e-6
    H = quadratic_problem(A_terms=[((1, 1), None, eps, 0.0)], K=8)
    a0 = H.norms()["A_max"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = kam_step(H, 40.0, 0.02, 0.002, epsilon=a0, mu=math.sqrt(a0), basis=simultaneous_approx(OMEGA, 40))
    return H, out


def test_single_mode_step_contracts(single_mode_step):
    H, (H_out, step, diag) = single_mode_step
    assert diag.norm_A_out <= diag.epsilon / 16
    assert diag.targets_met


def test_step_output_is_pullback_of_input(single_mode_step):
    # H(Phi(theta, I); y) == H+(theta, I; target) with the map evaluated pointwise
    H, (H_out, step, _) = single_mode_step
    rng = np.random.default_rng(5)
    th = rng.random((40, 2))
    I = 0.01 * rng.normal(size=(40, 2))
    for p in (0, 4, 8):
        y = step.preimages[p]
        e, A, B, M = H.interpolate(y)
        th1, I1 = step.maps[p].apply(th, I)
        lhs = hamiltonian_values(e, y, A, B, M, th1, I1)
        rhs = hamiltonian_values(H_out.e[p], step.targets[p], H_out.A[p], H_out.B[p], H_out.M[p], th, I)
        np.testing.assert_allclose(lhs, rhs, atol=1e-13)


def test_step_maps_symplectic(single_mode_step):
    _, (_, step, diag) = single_mode_step
    assert diag.symplectic_defect <= 1e-8
    th = np.random.default_rng(6).random((100, 2))
    for maps in step.stage_maps:
        for m in maps:
            assert np.abs(m.jacobian_determinant(th) - 1).max() <= 1e-8


# -- schedule -----------------------------------------------------------------

@pytest.fixture(scope="module")
def schedule():
    env = Envelope(build_profile(OMEGA, 4096))
    return KamSchedule(1e-4, 1e-2, 0.02, 0.025, 1.0, 0.1, 1023, env, 1.0, 13.16)


def test_schedule_geometric_sequences(schedule):
    for i in range(8):
        assert schedule.eps_i(i) == 1e-4 * 16.0**-i
        assert schedule.mu_i(i) == 1e-2 * 4.0**-i
        assert schedule.h_i(i) == 0.025 * 2.0**-i
        assert schedule.Delta_i(i + 1) == pytest.approx(2 * schedule.Delta_i(i), rel=1e-15)


def test_schedule_radius_sums(schedule):
    for count in (1, 5, 12):
        total = sum(schedule.delta_i(i) for i in range(count))
        assert total == pytest.approx(0.01 * (1 - 2.0**-count), rel=1e-14)
    assert schedule.r_i(40) == pytest.approx(0.01, rel=1e-10)


def test_schedule_Q_inverts_delta(schedule):
    for i in range(1, 10):
        Q = schedule.Q_i(i)
        assert float(schedule.envelope.delta(Q)) == pytest.approx(schedule.Delta_i(i), rel=1e-10)


def test_schedule_series_bounds(schedule):
    for row in schedule.series_bounds(12):
        if row["series"].startswith("sum delta_i"):
            assert row["partial_sum"] == pytest.approx(row["bound"], rel=1e-14)
        elif row["series"] == "sum sigma_i <= s/2":
            continue  # needs the selected Q0; checked on the golden run
        else:
            assert row["partial_sum"] <= row["bound"] * (1 + 1e-12), row


# -- iteration ----------------------------------------------------------------

def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        KamConfig.from_dict({"alpha": 1.0, "bogus": 1})
    with pytest.raises(ValueError):
        KamConfig.from_dict({"s": -1.0})


def test_unperturbed_run_stays_at_identity():
    # only rounding noise of the node expansion is left to remove
    run = run_config(GOLDEN_CONFIG, problem={**GOLDEN_CONFIG["problem"], "epsilon": 0.0})
    res = run.result
    assert res.converged and res.history[0]["norm_A_in"] <= 1e-10
    np.testing.assert_allclose(res.omega_star, res.omega0, atol=1e-14)
    emb = res.embedding
    assert max(np.abs(emb.E).max(), np.abs(emb.F).max(), np.abs(emb.G).max()) <= 1e-10
    rep = invariance_residual(res, run.problem.H, T=100.0)
    # rounding accumulated over 1e5 integrator steps
    assert rep.dynamical <= 1e-9


def test_golden_run_converges(golden_run):
    res = golden_run.result
    assert res.converged and res.failure is None
    assert res.residual["A"] <= 1e-12 and res.residual["B"] <= 1e-12


def test_golden_run_contraction(golden_run):
    for h in golden_run.result.history:
        if h["targets_met"]:
            assert h["kappa_A"] <= 1 / 16 and h["kappa_B"] <= 1 / 4
            assert h["norm_A_out"] <= h["epsilon"] / 16 and h["norm_B_out"] <= h["mu"] / 4


def test_golden_run_frequency_shift(golden_run):
    res = golden_run.result
    assert res.frequency_shift <= 10 * math.sqrt(1e-6)
    assert res.to_dict()["c3_measured"] >= 0


def test_golden_run_width_budget(golden_run):
    hist = golden_run.result.history
    assert sum(h["sigma"] for h in hist) <= 0.1 / 2


def test_golden_run_phi_inversion(golden_run):
    for step in golden_run.result.transformations:
        assert np.abs(step.phi_values - step.targets).max() <= 1e-10
        inv_shift = np.abs(step.preimages - step.targets).max()
        fwd_shift = np.abs(step.phi_values - step.preimages).max()
        assert inv_shift <= fwd_shift * (1 + 1e-12) + 1e-300


def test_golden_run_composition_law(golden_run):
    res = golden_run.result
    rng = np.random.default_rng(7)
    th = rng.random((50, 2))
    I = 0.005 * rng.normal(size=(50, 2))
    for i, step in enumerate(res.transformations):
        nodes = step.nodes_in
        before, after = res.accumulated[i], res.accumulated[i + 1]
        for p, y in enumerate(step.preimages):
            stacked = nodes.interpolate(np.stack([m.stacked() for m in before]), y)
            outer = NearIdentityMap.from_stacked(stacked, 2)
            seq = outer.apply(*step.maps[p].apply(th, I))
            direct = after[p].apply(th, I)
            np.testing.assert_allclose(direct[0], seq[0], atol=1e-9)
            np.testing.assert_allclose(direct[1], seq[1], atol=1e-9)


def test_golden_run_symplectic(golden_run):
    assert max(h["symplectic_defect"] for h in golden_run.result.history) <= 1e-8


def test_golden_run_invariance(golden_invariance):
    assert golden_invariance.report.dynamical <= 1e-6


def test_truncated_run_is_worse(golden_run):
    short = run_config(GOLDEN_CONFIG, max_steps=2)
    assert short.result.partial and short.result.steps == 2
    assert short.result.residual["A"] >= 10 * golden_run.result.residual["A"]
    # the dynamical comparison is reported only; it is not guaranteed to be monotone
    T = 2.0
    full = invariance_residual(golden_run.result, golden_run.problem.H, T=T).dynamical
    trunc = invariance_residual(short.result, short.problem.H, T=T).dynamical
    print(f"dynamical residual over T={T}: converged {full:.3g}, two steps {trunc:.3g}, "
          f"ratio {trunc / max(full, 1e-300):.3g}")


def test_result_serialization(golden_run):
    res = golden_run.result
    data = json.loads(res.to_json())
    assert data["converged"] and len(data["history"]) == res.steps
    assert res.torus_csv(8).count("\n") == 65
    assert res.history_csv().count("\n") == res.steps + 1
