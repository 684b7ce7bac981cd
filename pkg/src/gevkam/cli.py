"""Command-line front end: frequency analysis, estimate checks, KAM runs and the Bessi family.

Every command writes into ``--out`` a ``manifest.json`` indexing the emitted
JSON, CSV and SVG files.  Exit codes: 0 success, 1 usage or configuration
error, 2 resonant or unsupported input, 3 partial run or violated
precondition.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
import warnings
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .arithmetic import (
    GOLDEN,
    Q0Unsatisfiable,
    build_profile,
    classify,
    comparison_sums,
    liouville_number,
    select_Q0,
)
from .gevrey import GevreyParams, norm_trig_poly, verify_estimates, verify_lemma_comp, verify_lemma_product
from .hamiltonians import BessiSpec, bessi_hamiltonian, build_problem, condition_C_alpha, parse_frequency
from .kam import KamConfig, KamPreconditionError, KamWarning, invariance_residual, kam_iterate
from .rational_approx import basis_from_convergents
from .series import FourierTaylorSeries, average_along, dumps_canonical, full_average

EXIT_OK, EXIT_CONFIG, EXIT_RESONANT, EXIT_PARTIAL = 0, 1, 2, 3


class ConfigError(ValueError):
    """Malformed command input."""


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


class OutputDir:
    """Collects artifacts and writes the manifest."""

    def __init__(self, path: str | Path, command: str, args: dict, seed: int | None = None):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.args = args
        self.seed = seed
        self.files: list = []

    def write(self, name: str, text: str, kind: str) -> Path:
        p = self.path / name
        p.write_text(text)
        self.files.append({"name": name, "kind": kind, "sha256": hashlib.sha256(text.encode()).hexdigest()})
        return p

    def json(self, name: str, obj) -> Path:
        return self.write(name, dumps_canonical(obj) + "\n", "json")

    def csv(self, name: str, text: str) -> Path:
        return self.write(name, text, "csv")

    def svg(self, name: str, text: str) -> Path:
        return self.write(name, text, "svg")

    def finish(self, exit_code: int, summary: dict | None = None) -> None:
        manifest = {"tool": "gevkam", "version": __version__, "command": self.command, "args": self.args,
                    "seed": self.seed, "exit_code": exit_code, "artifacts": self.files, "summary": summary or {}}
        (self.path / "manifest.json").write_text(dumps_canonical(manifest) + "\n")


def load_json(path: str | Path):
    """Read a JSON file written by this tool (or a configuration file)."""
    with open(path) as fh:
        return json.load(fh)


def svg_polyline(xs, ys, title: str, xlabel: str = "", ylabel: str = "", width: int = 640,
                 height: int = 400) -> str:
    """Minimal SVG line plot (linear axes over the finite data range)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    keep = np.isfinite(xs) & np.isfinite(ys)
    xs, ys = xs[keep], ys[keep]
    pad = 40
    if xs.size == 0:
        pts = ""
    else:
        x0, x1 = xs.min(), xs.max()
        y0, y1 = ys.min(), ys.max()
        sx = (width - 2 * pad) / (x1 - x0 if x1 > x0 else 1.0)
        sy = (height - 2 * pad) / (y1 - y0 if y1 > y0 else 1.0)
        pts = " ".join(f"{pad + (x - x0) * sx:.2f},{height - pad - (y - y0) * sy:.2f}" for x, y in zip(xs, ys))
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
            f'<text x="{width / 2}" y="20" text-anchor="middle">{title}</text>\n'
            f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle">{xlabel}</text>\n'
            f'<text x="12" y="{height / 2}" transform="rotate(-90 12 {height / 2})" '
            f'text-anchor="middle">{ylabel}</text>\n'
            f'<polyline fill="none" stroke="black" stroke-width="1" points="{pts}"/>\n</svg>\n')


def _parse_alphas(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad alpha list {text!r}") from exc
    if not vals or any(a < 1 for a in vals):
        raise ConfigError("alpha values must be >= 1")
    return vals


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def _frequency_from_args(args) -> tuple[tuple, str]:
    chosen = [args.golden, args.omega is not None, args.liouville is not None]
    if sum(chosen) != 1:
        raise ConfigError("give exactly one of --golden, --omega, --liouville")
    if args.golden:
        return (1.0, GOLDEN), "golden"
    if args.liouville is not None:
        if args.liouville < 1:
            raise ConfigError("--liouville needs a positive number of terms")
        return (Fraction(1), liouville_number(args.liouville)), f"liouville-{args.liouville}"
    parts = [x.strip() for x in args.omega.split(",") if x.strip()]
    try:
        if all("/" in x or x.lstrip("-").isdigit() for x in parts):
            omega = tuple(Fraction(x) for x in parts)
        else:
            omega = tuple(float(x) for x in parts)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad frequency {args.omega!r}") from exc
    if len(omega) < 2:
        raise ConfigError("a frequency needs at least two components")
    return omega, "omega"


def _component_text(x) -> str:
    """Exact text for small fractions, otherwise 17 significant digits."""
    if isinstance(x, Fraction) and x.denominator < 10**30:
        return str(x)
    return format(float(x), ".17g")


def cmd_analyze(args) -> int:
    omega, label = _frequency_from_args(args)
    alphas = _parse_alphas(args.alpha)
    if args.qmax < 4:
        raise ConfigError("--qmax must be at least 4")
    out = OutputDir(args.out, "analyze", {"frequency": label, "alpha": alphas, "qmax": args.qmax})
    profile = build_profile(omega, args.qmax, label)
    # the dyadic partial sums reach the next power of two above the horizon
    dyadic_profile = build_profile(omega, 2 ** (int(math.log2(args.qmax)) + 1), label)
    report = {"frequency": [_component_text(x) for x in omega], "label": label, "qmax": args.qmax,
              "method": profile.method, "resonant": profile.resonant,
              "tail_model": profile.tail.to_dict() if profile.tail else None, "alphas": []}
    for a in alphas:
        entry = {"alpha": a, "classification": classify(profile, a).to_dict()}
        if not profile.resonant:
            sums = comparison_sums(dyadic_profile, a, args.qmax)
            entry["comparison_bounds_hold"] = bool(sums["lower_ok"].all() and sums["upper_ok"].all())
            try:
                choice = select_Q0(profile, a, args.s)
                entry["Q0"] = {"Q0": choice.Q0, "lhs": choice.lhs, "rhs": choice.rhs, "s": args.s}
            except Q0Unsatisfiable as exc:
                entry["Q0"] = {"error": str(exc), "s": args.s}
        report["alphas"].append(entry)
    out.json("report.json", report)
    rows = ["Q,psi"] + [f"{int(q)},{float(p)!r}" for q, p in zip(profile.Q, profile.psi)]
    out.csv("psi.csv", "\n".join(rows) + "\n")
    with np.errstate(divide="ignore"):
        out.svg("psi.svg", svg_polyline(profile.Q, np.log(profile.psi), f"ln Psi ({label})", "Q", "ln Psi"))
    code = EXIT_RESONANT if profile.resonant else EXIT_OK
    out.finish(code, {"resonant": profile.resonant,
                      "verdicts": {str(e["alpha"]): e["classification"]["br_alpha"]["verdict"]
                                   for e in report["alphas"]}})
    return code


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def random_trig_poly(rng: np.random.Generator, n: int = 2, K_max: int = 6, max_terms: int = 6,
                     scale: float = 1.0) -> FourierTaylorSeries:
    """Random real trigonometric polynomial with a few modes of order at most ``K_max``."""
    K = int(rng.integers(1, K_max + 1))
    terms = []
    for _ in range(int(rng.integers(1, max_terms + 1))):
        while True:
            k = tuple(int(x) for x in rng.integers(-K, K + 1, size=n))
            if sum(abs(x) for x in k) <= K:
                break
        terms.append((k, None, scale * float(rng.normal()), scale * float(rng.normal())))
    return FourierTaylorSeries.from_terms(n, K, 0, terms)


def norm_suite(seed: int = 0, pairs: int = 200, compositions: int = 50, alpha: float = 1.0,
               s: float = 0.5) -> list[dict]:
    """Product, triangle and derivative estimates on random pairs and composition estimates."""
    rng = np.random.default_rng(seed)
    params = GevreyParams(alpha, s)
    sigma = s / 2
    out = []
    for i in range(pairs):
        f, g = random_trig_poly(rng), random_trig_poly(rng)
        for rep in verify_estimates(f, g, params, sigma)[:-1]:
            out.append({"case": i, **rep.to_dict()})
    narrow = params.with_width(s - sigma)
    done = 0
    while done < compositions:
        f = random_trig_poly(rng, K_max=4)
        u = [random_trig_poly(rng, K_max=2, max_terms=3) for _ in range(2)]
        nu = norm_trig_poly(u, narrow)
        factor = 0.5 * sigma**alpha / nu
        u = [FourierTaylorSeries(ui.coeffs * factor) for ui in u]
        rep = verify_estimates(f, f, params, sigma, u)[-1]
        if rep.details.get("skipped"):
            continue
        out.append({"case": f"composition-{done}", **rep.to_dict()})
        done += 1
    return out


def majorant_suite(L: int = 500, alphas=(1.0, 1.5, 2.0, 3.0)) -> list[dict]:
    out = []
    for a in alphas:
        params = GevreyParams(a, 1.0)
        out.append(verify_lemma_product(params, L).to_dict())
        out.extend(r.to_dict() for r in verify_lemma_comp(params, L))
    return out


def averaging_suite(count: int = 20, K: int = 8, seed: int = 0) -> list[dict]:
    """Iterated averages along convergent bases against the full average."""
    rng = np.random.default_rng(seed)
    out = []
    for j in range(1, count + 1):
        basis = basis_from_convergents(GOLDEN, j)
        f = random_trig_poly(rng, K_max=K, max_terms=12)
        g = f
        for v in basis.vectors:
            g = average_along(g, v)
        err = float(np.abs(g.coeffs - full_average(f).coeffs).max())
        out.append({"inequality": "iterated average = full average", "index": j,
                    "denominators": list(basis.denominators), "det": basis.det,
                    "lhs": err, "rhs": 1e-14, "pass": err <= 1e-14 and abs(basis.det) == 1})
    return out


def cmd_verify(args) -> int:
    out = OutputDir(args.out, "verify", {"suite": args.suite, "L": args.L, "seed": args.seed}, args.seed)
    if args.suite == "majorants":
        if args.L < 1:
            raise ConfigError("--L must be at least 1")
        reports = majorant_suite(args.L)
    elif args.suite == "norms":
        reports = norm_suite(args.seed)
    else:
        reports = averaging_suite(seed=args.seed)
    for i, rep in enumerate(reports):
        out.json(f"check_{i:04d}.json", rep)
    failed = sum(1 for r in reports if not r["pass"])
    out.json("summary.json", {"suite": args.suite, "checks": len(reports), "failed": failed, "seed": args.seed})
    code = EXIT_OK if failed == 0 else EXIT_PARTIAL
    out.finish(code, {"checks": len(reports), "failed": failed})
    return code


# ---------------------------------------------------------------------------
# kam
# ---------------------------------------------------------------------------

SOLVER_KEYS = set(KamConfig.__dataclass_fields__) | {"n"}


def kam_config_from_dict(data: dict) -> tuple[KamConfig, dict, dict | None, int]:
    """Split a run configuration into solver settings, problem and dynamics sections."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    problem = data.get("problem")
    if not isinstance(problem, dict):
        raise ConfigError("configuration needs a 'problem' section")
    dynamics = data.get("dynamics")
    unknown = set(data) - SOLVER_KEYS - {"problem", "dynamics"}
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    solver = {k: v for k, v in data.items() if k in SOLVER_KEYS}
    n = int(solver.pop("n", 2))
    if problem.get("mode") == "vector_field":
        solver.setdefault("epsilon", 0.0)
        solver.setdefault("eta", 0.0)
    try:
        cfg = KamConfig.from_dict(solver)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, problem, dynamics, n


def cmd_kam(args) -> int:
    try:
        data = load_json(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read configuration: {exc}") from exc
    cfg, problem_data, dynamics, n = kam_config_from_dict(data)
    out = OutputDir(args.out, "kam", {"config": str(args.config)}, cfg.seed)
    try:
        problem = build_problem(problem_data, cfg, n)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    profile = build_profile(problem.omega0, int(problem_data.get("horizon", 4096)))
    if profile.resonant:
        out.json("error.json", {"error": "resonant frequency",
                                "omega0": [_component_text(x) for x in problem.omega0]})
        out.finish(EXIT_RESONANT)
        return EXIT_RESONANT
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", KamWarning)
        try:
            result = kam_iterate(problem.H, profile, cfg)
        except KamPreconditionError as exc:
            payload = {"error": "precondition", "inequality": exc.inequality, "lhs": exc.lhs, "rhs": exc.rhs,
                       "message": str(exc)}
            out.json("error.json", payload)
            out.finish(EXIT_PARTIAL, payload)
            print(str(exc), file=sys.stderr)
            return EXIT_PARTIAL
        except Q0Unsatisfiable as exc:
            out.json("error.json", {"error": "Q0", "message": str(exc)})
            out.finish(EXIT_PARTIAL)
            print(str(exc), file=sys.stderr)
            return EXIT_PARTIAL
    payload = result.to_dict()
    payload["problem"] = {"mode": problem.mode, "epsilon": problem.epsilon, "wiring": problem.wiring,
                          "expansion": problem.expansion.to_dict() if problem.expansion else None}
    payload["warnings"] = [str(w.message) for w in caught]
    if dynamics is not None and result.converged:
        rep = invariance_residual(result, problem.H, T=float(dynamics.get("T", 100.0)),
                                  dt=float(dynamics.get("dt", 1e-3)), points=int(dynamics.get("points", 32)),
                                  seed=int(dynamics.get("seed", cfg.seed)))
        payload["invariance"] = rep.to_dict()
    out.json("result.json", payload)
    out.csv("torus.csv", result.torus_csv())
    out.csv("history.csv", result.history_csv())
    if result.history:
        steps = [h["step"] for h in result.history]
        with np.errstate(divide="ignore"):
            out.svg("residual.svg", svg_polyline(steps, [math.log10(max(h["norm_A_out"], 1e-300))
                                                         for h in result.history],
                                                 "log10 |A| after each step", "step", "log10 |A|"))
    code = EXIT_OK if result.converged else EXIT_PARTIAL
    out.finish(code, {"converged": result.converged, "steps": result.steps, "residual": result.residual,
                      "omega_star": result.omega_star.tolist()})
    return code


# ---------------------------------------------------------------------------
# bessi
# ---------------------------------------------------------------------------


def cmd_bessi(args) -> int:
    try:
        data = load_json(args.spec)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read spec: {exc}") from exc
    try:
        spec = BessiSpec.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid spec: {exc}") from exc
    out = OutputDir(args.out, "bessi", {"spec": str(args.spec)}, data.get("seed"))
    res = bessi_hamiltonian(spec)
    out.json("hamiltonian.json", res.to_dict())
    summary = {"norm_over_epsilon": res.ratio}
    sweep = data.get("sweep")
    if sweep:
        rows = []
        for order in sweep:
            k = [int(order)] + [0] * (spec.n - 1)
            kt = [0, int(order) // 2] + [0] * (spec.n - 2) if spec.n > 1 else [0]
            r = bessi_hamiltonian(BessiSpec(spec.alpha, spec.s, spec.epsilon, spec.mu, tuple(k), tuple(kt)))
            rows.append({"k": k, "k_tilde": kt, "norm": r.norm, "norm_over_epsilon": r.ratio})
        out.json("sweep.json", {"alpha": spec.alpha, "s": spec.s, "rows": rows,
                                "max_ratio": max(r["norm_over_epsilon"] for r in rows)})
        summary["sweep_max_ratio"] = max(r["norm_over_epsilon"] for r in rows)
    witness = data.get("witness")
    if witness:
        omega = witness.get("omega", "golden")
        if isinstance(omega, dict) and "liouville" in omega:
            omega = (Fraction(1), liouville_number(int(omega["liouville"])))
        else:
            omega = parse_frequency(omega)
        rep = condition_C_alpha(omega, float(witness.get("alpha", spec.alpha)), float(witness["s0"]),
                                int(witness.get("horizon", 200)))
        out.json("witnesses.json", rep.to_dict())
        summary["witnesses"] = len(rep.witnesses)
    out.finish(EXIT_OK, summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gevkam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="arithmetic report of a frequency vector")
    a.add_argument("--golden", action="store_true", help="use (1, (sqrt 5 - 1)/2)")
    a.add_argument("--omega", help="comma separated components (fractions like 1/3 are exact)")
    a.add_argument("--liouville", type=int, help="(1, sum_{j<=N} 10^-j!) with N terms")
    a.add_argument("--alpha", default="1", help="comma separated Gevrey exponents")
    a.add_argument("--qmax", type=int, default=200, help="sampling horizon of Psi")
    a.add_argument("--s", type=float, default=0.1, help="Gevrey width for the Q0 selection")
    a.add_argument("--out", default="out/analyze")
    a.set_defaults(func=cmd_analyze)

    k = sub.add_parser("kam", help="run the KAM iteration from a JSON configuration")
    k.add_argument("config")
    k.add_argument("--out", default="out/kam")
    k.set_defaults(func=cmd_kam)

    v = sub.add_parser("verify", help="check the norm and majorant estimates")
    v.add_argument("--suite", choices=("majorants", "norms", "averaging"), required=True)
    v.add_argument("--L", type=int, default=500, help="majorant order")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default="out/verify")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bessi", help="build a member of the Gevrey destruction family")
    b.add_argument("spec")
    b.add_argument("--out", default="out/bessi")
    b.set_defaults(func=cmd_bessi)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    start = time.perf_counter()
    try:
        code = args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{args.command}: exit {code} in {time.perf_counter() - start:.2f} s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
