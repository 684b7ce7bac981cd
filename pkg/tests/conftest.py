import copy
import time
from types import SimpleNamespace

import pytest

from gevkam.arithmetic import build_profile
from gevkam.cli import kam_config_from_dict
from gevkam.hamiltonians import build_problem
from gevkam.kam import invariance_residual, kam_iterate

GOLDEN_CONFIG = {
    "n": 2,
    "alpha": 1.0,
    "s": 0.1,
    "r": 0.02,
    "h": 0.025,
    "K": 12,
    "max_steps": 20,
    "residual_floor": 1e-12,
    "seed": 0,
    "problem": {
        "mode": "hamiltonian",
        "omega0": "golden",
        "integrable": {"kind": "quadratic"},
        "epsilon": 1e-6,
        "perturbation": [{"k": [1, 0], "cos": 1.0}, {"k": [1, 1], "cos": 1.0}],
    },
}

VECTOR_FIELD_CONFIG = {
    "n": 2,
    "alpha": 1.0,
    "s": 0.1,
    "r": 0.02,
    "h": 0.025,
    "K": 12,
    "problem": {"mode": "vector_field", "omega0": "golden", "B": [[{"k": [1, 0], "cos": 1e-4}], []]},
}


def run_config(data: dict, horizon: int = 4096, **overrides) -> SimpleNamespace:
    """Build the problem of a run configuration and iterate it."""
    data = copy.deepcopy(data)
    data.update(overrides)
    cfg, problem_data, _, n = kam_config_from_dict(data)
    problem = build_problem(problem_data, cfg, n)
    profile = build_profile(problem.omega0, horizon)
    start = time.perf_counter()
    result = kam_iterate(problem.H, profile, cfg)
    return SimpleNamespace(config=cfg, problem=problem, profile=profile, result=result,
                           seconds=time.perf_counter() - start)


@pytest.fixture(scope="session")
def golden_run():
    return run_config(GOLDEN_CONFIG)


@pytest.fixture(scope="session")
def golden_invariance(golden_run):
    start = time.perf_counter()
    report = invariance_residual(golden_run.result, golden_run.problem.H, T=100.0, dt=1e-3, points=32)
    return SimpleNamespace(report=report, seconds=time.perf_counter() - start)


@pytest.fixture(scope="session")
def vector_field_run():
    return run_config(VECTOR_FIELD_CONFIG)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
