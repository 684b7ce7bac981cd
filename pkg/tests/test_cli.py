import hashlib
import json
from pathlib import Path

import pytest

from gevkam.cli import EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, EXIT_RESONANT, main
from gevkam.series import FourierTaylorSeries

from conftest import GOLDEN_CONFIG

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(tmp_path: Path, *argv: str) -> tuple[int, Path]:
    out = tmp_path / "out"
    return main([*argv, "--out", str(out)]), out


def manifest(out: Path) -> dict:
    return json.loads((out / "manifest.json").read_text())


def test_manifest_hashes_match_files(tmp_path):
    code, out = run(tmp_path, "analyze", "--golden", "--alpha", "1,2", "--qmax", "100")
    assert code == EXIT_OK
    m = manifest(out)
    assert m["exit_code"] == 0 and m["command"] == "analyze"
    assert {a["name"] for a in m["artifacts"]} == {"report.json", "psi.csv", "psi.svg"}
    for a in m["artifacts"]:
        assert hashlib.sha256((out / a["name"]).read_bytes()).hexdigest() == a["sha256"]


def test_analyze_reports_verdicts(tmp_path):
    code, out = run(tmp_path, "analyze", "--golden", "--alpha", "1,2", "--qmax", "100")
    report = json.loads((out / "report.json").read_text())
    assert [e["classification"]["br_alpha"]["verdict"] for e in report["alphas"]] == ["holds", "holds"]
    assert report["alphas"][0]["Q0"]["Q0"] >= 4
    assert (out / "psi.csv").read_text().splitlines()[0] == "Q,psi"


def test_analyze_liouville(tmp_path):
    code, out = run(tmp_path, "analyze", "--liouville", "3", "--qmax", "200")
    assert code == EXIT_OK
    assert json.loads((out / "report.json").read_text())["frequency"][1] == "110001/1000000"  # 10**-1 + 10**-2 + 10**-6


def test_analyze_resonant_frequency(tmp_path):
    code, out = run(tmp_path, "analyze", "--omega", "1,1/2")
    assert code == EXIT_RESONANT
    assert manifest(out)["summary"]["resonant"]


@pytest.mark.parametrize("argv", [
    ["analyze"],
    ["analyze", "--golden", "--omega", "1,0.5"],
    ["analyze", "--golden", "--alpha", "0.5"],
    ["analyze", "--omega", "1,x"],
    ["kam", "missing.json"],
    ["frobnicate"],
])
def test_usage_errors(tmp_path, argv):
    assert run(tmp_path, *argv)[0] == EXIT_CONFIG


def test_malformed_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**GOLDEN_CONFIG, "K": "twelve"}))
    assert run(tmp_path, "kam", str(bad))[0] == EXIT_CONFIG
    bad.write_text(json.dumps({**GOLDEN_CONFIG, "typo": 1}))
    assert run(tmp_path, "kam", str(bad))[0] == EXIT_CONFIG
    bad.write_text("{not json")
    assert run(tmp_path, "kam", str(bad))[0] == EXIT_CONFIG


def test_shipped_golden_config_matches_test_settings():
    data = json.loads((CONFIGS / "golden.json").read_text())
    data.pop("dynamics")
    assert data == GOLDEN_CONFIG


def test_kam_golden(tmp_path):
    code, out = run(tmp_path, "kam", str(CONFIGS / "golden.json"))
    assert code == EXIT_OK
    result = json.loads((out / "result.json").read_text())
    assert result["converged"] and result["invariance"]["dynamical"] <= 1e-6
    names = {a["name"] for a in manifest(out)["artifacts"]}
    assert names == {"result.json", "torus.csv", "history.csv", "residual.svg"}


@pytest.mark.parametrize("name", ["unperturbed.json", "vector_field.json"])
def test_kam_presets_converge(tmp_path, name):
    code, out = run(tmp_path, "kam", str(CONFIGS / name))
    assert code == EXIT_OK
    assert manifest(out)["summary"]["converged"]


def test_kam_oversized_perturbation_is_partial(tmp_path):
    code, out = run(tmp_path, "kam", str(CONFIGS / "oversized.json"))
    assert code == EXIT_PARTIAL
    error = json.loads((out / "error.json").read_text())
    assert error["error"] == "precondition" and error["lhs"] > error["rhs"]


def test_kam_resonant_frequency(tmp_path):
    cfg = tmp_path / "resonant.json"
    problem = {**GOLDEN_CONFIG["problem"], "omega0": {"fraction": [[1, 1], [1, 2]]}}
    cfg.write_text(json.dumps({**GOLDEN_CONFIG, "problem": problem}))
    assert run(tmp_path, "kam", str(cfg))[0] == EXIT_RESONANT


@pytest.mark.parametrize("suite", ["majorants", "norms", "averaging"])
def test_verify_suites_pass(tmp_path, suite):
    code, out = run(tmp_path, "verify", "--suite", suite)
    summary = json.loads((out / "summary.json").read_text())
    assert code == EXIT_OK and summary["failed"] == 0 and summary["checks"] > 0


def test_bessi_command(tmp_path):
    code, out = run(tmp_path, "bessi", str(CONFIGS / "bessi.json"))
    assert code == EXIT_OK
    ham = json.loads((out / "hamiltonian.json").read_text())
    F = FourierTaylorSeries.from_dict(ham["series"])
    assert len(F.terms(tol=1e-40)) == 5
    sweep = json.loads((out / "sweep.json").read_text())
    assert [r["k"][0] for r in sweep["rows"]] == [5, 10, 20, 40]
    assert json.loads((out / "witnesses.json").read_text())["count"] > 0
