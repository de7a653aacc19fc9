"""Command-line front end: ``pooledweights <command> [options]``.

Exit codes: 0 success, 1 usage, input or validation error, 2 infeasible
balance or non-converged solve. Every command writes ``manifest.json`` with
package versions, the seed and a hash of the options.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import __version__, kernels
from . import diagnostics as diag
from . import estimators as est
from . import sensitivity as sens
from .data import FeatureSpec, Schema, build_features, load_csv
from .errors import ConvergenceError, InfeasibleBalanceError, PooledWeightsError
from .simulation import ESTIMATORS, SimConfig, run_monte_carlo
from .solver import LAMBDA_RULES, POOLINGS, SolverConfig, WeightSolution, solve, sweep_lambda

EXIT_OK, EXIT_USAGE, EXIT_SOLVE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_io(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="CSV with one row per unit")
    p.add_argument("--schema", help="column roles: JSON file or inline JSON object")
    p.add_argument("--features", help="feature spec: JSON file or inline JSON object")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)


def _add_solver(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=float, default=1e4)
    p.add_argument("--pooling", choices=POOLINGS, default="partial")
    p.add_argument("--lambda-rule", choices=LAMBDA_RULES, default="stratum")
    p.add_argument("--max-iterations", type=int, default=200)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pooledweights", description="Partially pooled balancing weights.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("weights", help="solve for control weights (never reads outcomes)")
    _add_io(p)
    _add_solver(p)

    p = sub.add_parser("estimate", help="subgroup and overall effect estimates")
    _add_io(p)
    _add_solver(p)
    p.add_argument("--weights", help="weights.json from the weights command; solved inline if absent")
    p.add_argument("--estimator", default="balancing",
                   choices=("balancing", "ipw_full_interaction", "ipw_fixed_effects", "regression"))
    p.add_argument("--raw-odds", action="store_true", help="IPW without per-stratum normalization")
    p.add_argument("--grouping", action="append", default=[],
                   help="stratum-to-group map (JSON {name: {stratum: group}} or CSV stratum,group)")
    p.add_argument("--augment", choices=("none", "ridge"), default="none")
    p.add_argument("--penalty-grid", type=_floats, default=list(est.DEFAULT_PENALTY_GRID))

    p = sub.add_parser("sweep", help="imbalance and ESS along a lambda grid")
    _add_io(p)
    _add_solver(p)
    p.add_argument("--grid", type=_floats, required=True)

    p = sub.add_parser("sensitivity", help="marginal sensitivity bounds with bootstrap intervals")
    _add_io(p)
    _add_solver(p)
    p.add_argument("--sens-lambda", type=_floats, default=[1.0], help="one or more Lambda values")
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--target", action="append", default=[],
                   help="'overall', 'stratum:<label>' or '<grouping>:<group>' (repeatable)")
    p.add_argument("--grouping", action="append", default=[])
    p.add_argument("--breakdown-grid", type=_floats)
    p.add_argument("--delta-grid", type=_floats)

    p = sub.add_parser("simulate", help="Monte Carlo comparison of estimators")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--d", type=int, default=50)
    p.add_argument("--G", type=int, default=10)
    p.add_argument("--m", type=int, default=500)
    p.add_argument("--estimators", default=",".join(ESTIMATORS))
    p.add_argument("--pscore-covariates", choices=("transformed", "raw"), default="transformed")
    p.add_argument("--records", action="store_true", help="also write per-replicate records.csv")
    return parser


# --------------------------------------------------------------------------- helpers


def _json_arg(text: str | None):
    if text is None:
        return None
    if text.lstrip().startswith("{"):
        return json.loads(text)
    return json.loads(Path(text).read_text(encoding="utf-8"))


def _options(args: argparse.Namespace) -> dict:
    """Options that determine the outputs (no output directory, no absolute paths)."""
    opts = {}
    for key, value in sorted(vars(args).items()):
        if key in ("out", "threads"):
            continue
        if key in ("input", "weights") and value is not None:
            value = Path(value).name
        elif key in ("grouping",):
            value = [Path(v).name for v in value]
        opts[key] = value
    return opts


def _write(out: Path, name: str, text: str, written: list[str]) -> None:
    if not text.endswith("\n"):
        text += "\n"
    (out / name).write_text(text, encoding="utf-8")
    written.append(name)


def _write_manifest(out: Path, args: argparse.Namespace, written: list[str], status: str) -> None:
    opts = _options(args)
    digest = hashlib.sha256(json.dumps(opts, sort_keys=True).encode()).hexdigest()
    manifest = {
        "command": args.command,
        "status": status,
        "seed": getattr(args, "seed", None),
        "config": opts,
        "config_hash": digest,
        "versions": {
            "pooledweights": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
            "kernel_backend": kernels.BACKEND,
        },
        "outputs": sorted(written),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load(args, read_outcome: bool):
    schema = Schema.load(args.schema)
    sample = load_csv(args.input, schema, read_outcome=read_outcome)
    spec_map = _json_arg(args.features)
    spec = FeatureSpec.from_mapping(spec_map) if spec_map is not None else None
    return sample, build_features(sample, spec)


def _solver_config(args) -> SolverConfig:
    return SolverConfig(lam=args.lam, pooling=args.pooling, lambda_rule=args.lambda_rule,
                        max_iterations=args.max_iterations)


def _groupings(paths: Sequence[str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for path in paths:
        p = Path(path)
        if p.suffix.lower() == ".csv":
            with open(p, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            if not rows or not {"stratum", "group"} <= set(rows[0]):
                raise PooledWeightsError(f"grouping file {p.name} needs columns stratum,group")
            out[p.stem] = {r["stratum"].strip(): r["group"].strip() for r in rows}
        else:
            payload = json.loads(p.read_text(encoding="utf-8"))
            for name, mapping in payload.items():
                out[str(name)] = {str(k): str(v) for k, v in mapping.items()}
    return out


def _checked_solve(features, sample, config) -> WeightSolution:
    sol = solve(features, sample, config)
    if not sol.converged:
        raise ConvergenceError(f"solver did not converge: {sol.message}", sol.gradient_norm)
    return sol


# --------------------------------------------------------------------------- commands


def cmd_weights(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sample, feats = _load(args, read_outcome=False)
    written: list[str] = []
    _write(out, "features.json", feats.provenance_json(), written)
    try:
        sol = solve(feats, sample, _solver_config(args))
    except InfeasibleBalanceError as exc:
        _write(out, "infeasible.json", json.dumps(
            {"error": str(exc), "feature": exc.feature, "violation": exc.violation}, indent=2, sort_keys=True
        ), written)
        _write_manifest(out, args, written, "infeasible")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVE
    _write(out, "weights.json", sol.to_json(sample, feats), written)
    bal = diag.balance_report(sol, feats, sample)
    _write(out, "balance.json", bal.to_json(), written)
    _write(out, "balance.csv", bal.to_csv(), written)
    overlap = diag.ess(sol, sample)
    _write(out, "overlap.json", overlap.to_json(), written)
    _write(out, "overlap.csv", overlap.to_csv(), written)
    status = "converged" if sol.converged else "not converged"
    _write_manifest(out, args, written, status)
    if not sol.converged:
        print(f"error: {sol.message}", file=sys.stderr)
        return EXIT_SOLVE
    return EXIT_OK


def cmd_estimate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sample, feats = _load(args, read_outcome=True)
    groupings = _groupings(args.grouping)
    written: list[str] = []
    solution = None
    if args.estimator == "regression":
        table = est.linear_regression_baseline(feats, sample)
    else:
        if args.estimator == "balancing":
            if args.weights:
                payload = json.loads(Path(args.weights).read_text(encoding="utf-8"))
                solution = WeightSolution.from_dict(payload, sample)
            else:
                solution = _checked_solve(feats, sample, _solver_config(args))
        else:
            mode = args.estimator[len("ipw_"):]
            model = est.fit_propensity(feats, sample, mode, args.penalty_grid, seed=args.seed)
            solution = est.ipw_weights(model, feats, sample, normalize=not args.raw_odds)
        table = est.weighted_means(solution, sample)
        if args.augment == "ridge":
            model = est.fit_outcome_ridge(feats, sample, args.penalty_grid, seed=args.seed)
            table = est.augment(table, solution, model, feats, sample)
    for name, mapping in groupings.items():
        table = table.with_grouping(name, mapping)
    _write(out, "estimates.json", table.to_json(), written)
    _write(out, "estimates.csv", table.to_csv(), written)
    _write_manifest(out, args, written, "ok")
    return EXIT_OK


def cmd_sweep(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sample, feats = _load(args, read_outcome=False)
    points = sweep_lambda(feats, sample, args.grid, _solver_config(args))
    written: list[str] = []
    rows = [p.__dict__ for p in points]
    _write(out, "sweep.json", json.dumps(rows, indent=2, sort_keys=True), written)
    lines = ["lambda,local_imbalance,global_imbalance,ess,converged"]
    lines += [f"{p.lam!r},{p.local_imbalance!r},{p.global_imbalance!r},{p.ess!r},{p.converged}" for p in points]
    _write(out, "sweep.csv", "\n".join(lines), written)
    ok = all(p.converged for p in points)
    _write_manifest(out, args, written, "converged" if ok else "not converged")
    return EXIT_OK if ok else EXIT_SOLVE


def _parse_target(text: str, groupings: dict[str, dict[str, str]]) -> sens.Target:
    if text == "overall":
        return sens.Target.overall()
    name, sep, value = text.partition(":")
    if not sep:
        raise UsageError(f"cannot parse target {text!r}")
    if name == "stratum":
        return sens.Target.stratum(value)
    if name not in groupings:
        raise UsageError(f"target {text!r} needs --grouping defining {name!r}")
    return sens.Target.group(name, value, groupings[name])


def cmd_sensitivity(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sample, feats = _load(args, read_outcome=True)
    groupings = _groupings(args.grouping)
    targets = [_parse_target(t, groupings) for t in (args.target or ["overall"])]
    for t in targets:
        t.cells(sample)
    config = _solver_config(args)
    solution = _checked_solve(feats, sample, config)
    procedure = sens.balancing_procedure(feats, config)
    base = sens.SensitivityConfig(
        lambda_sens=1.0, bootstrap_reps=args.bootstrap, confidence=args.confidence,
        seed=args.seed, threads=args.threads,
    )
    draws = sens.bootstrap_draws(procedure, sample, base)
    report: dict = {"bounds": [], "differences": []}
    for lam in args.sens_lambda:
        cfg = sens.SensitivityConfig(lam, args.bootstrap, args.confidence, args.seed, args.threads)
        bounds = [sens.bootstrap_ci(procedure, sample, t, cfg, solution, draws) for t in targets]
        report["bounds"].extend(b.to_dict() for b in bounds)
        if len(bounds) == 2:
            diff = sens.difference_bounds(bounds[0], bounds[1])
            entry = diff.to_dict()
            if args.delta_grid:
                entry["amplification"] = [
                    {"delta": d, "coefficient": c}
                    for d, c in sens.amplification_curve(sens.bound_width(diff), args.delta_grid)
                ]
            report["differences"].append(entry)
    if args.breakdown_grid:
        report["breakdown"] = {
            t.name: sens.breakdown_lambda(procedure, sample, t, args.breakdown_grid, base, draws).to_dict()
            for t in targets
        }
    written: list[str] = []
    _write(out, "sensitivity.json", json.dumps(report, indent=2, sort_keys=True), written)
    _write_manifest(out, args, written, "ok")
    return EXIT_OK


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = SimConfig(
        n=args.n, d=args.d, G=args.G, m=args.m, seed=args.seed,
        estimators=tuple(s.strip() for s in args.estimators.split(",") if s.strip()),
        pscore_covariates=args.pscore_covariates, threads=args.threads,
    )
    result = run_monte_carlo(config)
    written: list[str] = []
    _write(out, "simulation.json", result.to_json(), written)
    _write(out, "simulation.csv", result.to_csv(), written)
    if args.records:
        _write(out, "records.csv", result.records_csv(), written)
    _write_manifest(out, args, written, "ok")
    return EXIT_OK


COMMANDS = {
    "weights": cmd_weights,
    "estimate": cmd_estimate,
    "sweep": cmd_sweep,
    "sensitivity": cmd_sensitivity,
    "simulate": cmd_simulate,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be positive")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (InfeasibleBalanceError, ConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVE
    except (PooledWeightsError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
