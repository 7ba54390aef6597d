"""Command-line surface: fit, contour, predict, simulate.

Every run writes its data artifacts plus a manifest.json into --out.  Errors
are printed as machine-readable JSON on stdout with a distinct exit code per
failure class:

  2  bad usage (argparse)          5  estimation failure
  3  unreadable or malformed input 6  domain / usage error
  4  model validation failure      7  empty cut or bracketing failure
  70 unexpected internal error
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, baselines, genim, intervals, jointim, simulate
from .errors import (
    BracketError,
    DomainError,
    EmptyCut,
    EstimationError,
    ParseError,
    UsageError,
    ValidationError,
)
from .model import (
    PredictionTarget,
    TargetKind,
    dataset_summary,
    load_dataset,
    prediction_constants,
    spectral_summary,
    sufficient_stats,
)

EXIT_PARSE = 3
EXIT_VALIDATION = 4
EXIT_ESTIMATION = 5
EXIT_DOMAIN = 6
EXIT_CUT = 7
EXIT_INTERNAL = 70

_CONTOUR_METHODS = ("joint", "gen", "adj-gen")
_PREDICT_METHODS = (
    baselines.ORACLE, baselines.STUDENT_T, baselines.SATTERTHWAITE,
    baselines.GEN_SATTERTHWAITE, simulate.JOINT_IM, simulate.ADJ_JOINT_IM,
    simulate.GEN_IM, simulate.ADJ_GEN_IM, simulate.PARAM_BOOT,
    simulate.NONPAR_BOOT, "iid-normal",
)

SCHEMAS = {
    "interval": {
        "type": "object",
        "required": ["method", "kind", "level", "lower", "upper", "diagnostics"],
        "properties": {
            "method": {"type": "string"},
            "kind": {"type": "string"},
            "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "lower": {"type": "number"},
            "upper": {"type": "number"},
            "diagnostics": {"type": "object"},
        },
    },
    "fit": {
        "type": "object",
        "required": ["n", "N", "p", "L", "lambdas", "mults", "reml"],
        "properties": {
            "n": {"type": "integer"}, "N": {"type": "integer"},
            "p": {"type": "integer"}, "L": {"type": "integer"},
            "lambdas": {"type": "array", "items": {"type": "number"}},
            "mults": {"type": "array", "items": {"type": "integer"}},
            "reml": {
                "type": "object",
                "required": ["sigma_alpha2", "sigma_eps2", "eta_hat", "rho_hat",
                             "converged", "boundary"],
            },
        },
    },
    "diagnostics": {
        "type": "object",
        "required": ["method"],
        "properties": {
            "method": {"type": "string"},
            "rho_grid": {"type": "array", "items": {"type": "number"}},
            "acceptance": {"type": "array", "items": {"type": "number"}},
            "ess_u": {"type": "array", "items": {"type": "number"}},
            "ess_v": {"type": "array", "items": {"type": "number"}},
            "mode": {"type": "string"},
        },
    },
    "simreport": {
        "type": "object",
        "required": ["config", "replications", "rows"],
        "properties": {
            "replications": {"type": "integer"},
            "rows": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["method", "target", "level", "coverage",
                                 "mean_length", "length_ratio", "n_failures"],
                },
            },
        },
    },
    "manifest": {
        "type": "object",
        "required": ["command", "argv", "seed", "tool_version", "wall_time_s",
                     "outputs"],
        "properties": {
            "command": {"type": "string"},
            "argv": {"type": "array", "items": {"type": "string"}},
            "seed": {"type": ["integer", "null"]},
            "tool_version": {"type": "string"},
            "wall_time_s": {"type": "number"},
            "outputs": {"type": "array", "items": {"type": "string"}},
        },
    },
}


def _write_json(path: Path, payload: dict) -> None:
    with path.open("w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _write_manifest(outdir: Path, command: str, argv: list[str], seed,
                    t0: float, outputs: list[Path]) -> Path:
    path = outdir / "manifest.json"
    _write_json(path, {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "tool_version": __version__,
        "wall_time_s": time.perf_counter() - t0,
        "outputs": [str(p) for p in outputs],
    })
    return path


def _schema_from_args(args) -> dict:
    covs = [c for c in (args.covariates or "").split(",") if c]
    return {"response": args.response, "group": args.group, "covariates": covs}


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="input CSV path")
    p.add_argument("--response", default="response", help="response column name")
    p.add_argument("--group", default="group", help="group column name")
    p.add_argument("--covariates", default="",
                   help="comma-separated numeric covariate columns (optional)")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, default=0, help="random seed")


def _load(args):
    dataset = load_dataset(args.data, _schema_from_args(args))
    spectrum = spectral_summary(dataset)
    stats_ = sufficient_stats(dataset, spectrum)
    return dataset, spectrum, stats_


def _target_for(dataset, name: str, x_spec: str | None = None) -> PredictionTarget:
    """Prediction point: intercept row by default, or --x values."""
    kind = TargetKind(name)
    if x_spec:
        x = np.array([float(v) for v in x_spec.split(",")], dtype=float)
        if x.shape[0] != dataset.p:
            raise UsageError(f"--x needs {dataset.p} value(s), got {x.shape[0]}")
    else:
        x = np.eye(dataset.p)[0]
    return PredictionTarget(x=x, z=np.ones(dataset.a), kind=kind)


def _cmd_fit(args, argv) -> int:
    t0 = time.perf_counter()
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    dataset, spectrum, stats_ = _load(args)
    reml = baselines.reml_fit(stats_)
    payload = dataset_summary(dataset, spectrum)
    payload["reml"] = {
        "sigma_alpha2": reml.sigma_alpha2,
        "sigma_eps2": reml.sigma_eps2,
        "eta_hat": reml.eta_hat,
        "rho_hat": reml.rho_hat,
        "converged": reml.converged,
        "boundary": reml.boundary,
    }
    out = outdir / "fit.json"
    _write_json(out, payload)
    _write_manifest(outdir, "fit", argv, args.seed, t0, [out])
    print(f"wrote {out}")
    return 0


def _cmd_contour(args, argv) -> int:
    t0 = time.perf_counter()
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    dataset, spectrum, stats_ = _load(args)
    target = _target_for(dataset, args.target, args.x)
    consts = prediction_constants(dataset, target)
    rng = np.random.default_rng(args.seed)

    diagnostics: dict = {"method": args.method, "target": args.target}
    if args.method == "joint":
        rho_grid = np.linspace(0.001, 0.999, args.rho_grid)
        contour = jointim.marginal_contour(stats_, consts, rho_grid=rho_grid,
                                           m=args.m, rng=rng, burn=args.burn,
                                           x=target.x)
        grid = contour.center + contour.scale * np.linspace(
            -args.span, args.span, args.points)
        pi, best = contour.evaluate.profile(grid)
        contour.grid_theta, contour.grid_pi = grid, pi
        contour.grid_argmax_rho = rho_grid[best]
        diagnostics.update({
            "rho_grid": [float(v) for v in contour.meta["rho_grid"]],
            "acceptance": [float(v) for v in contour.meta["acceptance"]],
            "ess_u": [float(v) for v in contour.meta["ess_u"]],
            "ess_v": [float(v) for v in contour.meta["ess_v"]],
            "draws_per_point": contour.meta["draws_per_point"],
        })
    else:
        if args.method == "gen":
            mode = genim.DenominatorMode.sup()
        else:
            reml = baselines.reml_fit(stats_)
            delta = baselines.bootstrap_se_eta(dataset, stats_, B=args.eta_se_B,
                                               rng=rng, reml=reml,
                                               resampling="stratified")
            mode = genim.DenominatorMode.adjusted(reml.eta_hat, delta)
        contour = genim.gen_contour(stats_, consts, mode, x=target.x)
        grid = contour.center + contour.scale * np.linspace(
            -args.span, args.span, args.points)
        contour.grid_theta = grid
        contour.grid_pi = np.array([contour.evaluate(t) for t in grid])
        diagnostics["mode"] = contour.meta["mode"]
        diagnostics["nu"] = contour.meta["nu"]
        diagnostics["denominator"] = contour.meta["denominator"]

    csv_path = outdir / "contour.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["theta", "plausibility", "argmax_rho"])
        for i, (tval, pval) in enumerate(zip(contour.grid_theta, contour.grid_pi)):
            rho = ("" if contour.grid_argmax_rho is None
                   else f"{contour.grid_argmax_rho[i]:.6g}")
            writer.writerow([f"{tval:.10g}", f"{pval:.10g}", rho])
    diag_path = outdir / "diagnostics.json"
    _write_json(diag_path, diagnostics)
    _write_manifest(outdir, "contour", argv, args.seed, t0, [csv_path, diag_path])
    print(f"wrote {csv_path} and {diag_path}")
    return 0


def _cmd_predict(args, argv) -> int:
    t0 = time.perf_counter()
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    alpha = 1.0 - args.level
    dataset, spectrum, stats_ = _load(args)
    target = _target_for(dataset, args.target, args.x)
    consts = prediction_constants(dataset, target)
    rng = np.random.default_rng(args.seed)
    method = args.method

    if method == "iid-normal":
        report = baselines.iid_normal_interval(dataset.y, alpha)
    elif method in (baselines.ORACLE, baselines.STUDENT_T, baselines.SATTERTHWAITE,
                    baselines.GEN_SATTERTHWAITE):
        truth = None
        if method == baselines.ORACLE:
            if args.truth_sigma_alpha2 is None or args.truth_sigma_eps2 is None:
                raise UsageError("the oracle method needs --truth-sigma-alpha2 "
                                 "and --truth-sigma-eps2")
            truth = (args.truth_sigma_alpha2, args.truth_sigma_eps2)
        report = baselines.closed_form_interval(method, stats_, consts, dataset,
                                                target, truth=truth, alpha=alpha)
    elif method == simulate.GEN_IM:
        report = genim.gen_interval(stats_, consts, genim.DenominatorMode.sup(),
                                    alpha, x=target.x, kind=args.target)
    elif method == simulate.ADJ_GEN_IM:
        reml = baselines.reml_fit(stats_)
        delta = baselines.bootstrap_se_eta(dataset, stats_, B=args.eta_se_B,
                                           rng=rng, reml=reml,
                                           resampling="stratified")
        mode = genim.DenominatorMode.adjusted(reml.eta_hat, delta)
        report = genim.gen_interval(stats_, consts, mode, alpha, x=target.x,
                                    kind=args.target)
    elif method in (simulate.JOINT_IM, simulate.ADJ_JOINT_IM):
        rho_grid = np.linspace(0.001, 0.999, args.rho_grid)
        contour = jointim.marginal_contour(stats_, consts, rho_grid=rho_grid,
                                           m=args.m, rng=rng, burn=args.burn,
                                           x=target.x)
        mode = (intervals.JOINT_ADJUSTED if method == simulate.ADJ_JOINT_IM
                else intervals.NOMINAL)
        report = intervals.alpha_cut(contour, alpha, level_mode=mode,
                                     method=method, kind=args.target)
    elif method == simulate.PARAM_BOOT:
        report = baselines.parametric_bootstrap_interval(
            dataset, stats_, consts, args.boot_B, alpha, rng, target)
    elif method == simulate.NONPAR_BOOT:
        report = baselines.nonparametric_bootstrap_interval(
            dataset, args.boot_B, alpha, rng, TargetKind(args.target))
    else:
        raise UsageError(f"unknown method {method!r}")

    out = outdir / "interval.json"
    _write_json(out, report.to_dict())
    _write_manifest(outdir, "predict", argv, args.seed, t0, [out])
    print(json.dumps(report.to_dict()))
    return 0


def _cmd_simulate(args, argv) -> int:
    t0 = time.perf_counter()
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        config = simulate.StudyConfig.from_json(args.config)
    except OSError as exc:
        raise ParseError(f"cannot read {args.config}: {exc}") from exc
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"bad study config: {exc}") from exc
    threads = args.threads
    if threads is None:
        env = os.environ.get("MIXEDIM_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    config = simulate.StudyConfig.from_dict(
        {**config.to_dict(), "threads": threads})
    report = simulate.run_coverage_study(config)
    json_path = outdir / "simreport.json"
    csv_path = outdir / "simreport.csv"
    report.to_json(json_path)
    report.to_csv(csv_path)
    _write_manifest(outdir, "simulate", argv, config.seed, t0, [json_path, csv_path])
    print(f"wrote {json_path} and {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixedim",
        description="Prediction intervals for group-level effects in two-stage "
                    "mixed models: plausibility contours, classical baselines, "
                    "and coverage studies.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="REML fit and spectral summary as JSON")
    _add_data_args(p_fit)
    _add_common(p_fit)

    p_contour = sub.add_parser("contour", help="tabulate a plausibility contour")
    _add_data_args(p_contour)
    _add_common(p_contour)
    p_contour.add_argument("--method", choices=_CONTOUR_METHODS, required=True)
    p_contour.add_argument("--target", choices=[k.value for k in TargetKind],
                           default=TargetKind.GROUP_MEAN.value)
    p_contour.add_argument("--points", type=int, default=201)
    p_contour.add_argument("--span", type=float, default=6.0,
                           help="half-width of the grid in scale units")
    p_contour.add_argument("--rho-grid", type=int, default=100)
    p_contour.add_argument("--m", type=int, default=5000,
                           help="Monte Carlo draws per correlation grid point")
    p_contour.add_argument("--burn", type=int, default=1000)
    p_contour.add_argument("--eta-se-B", type=int, default=100)
    p_contour.add_argument("--x", default=None,
                           help="comma-separated fixed-effect covariate row")

    p_pred = sub.add_parser("predict", help="one prediction interval as JSON")
    _add_data_args(p_pred)
    _add_common(p_pred)
    p_pred.add_argument("--method", choices=_PREDICT_METHODS, required=True)
    p_pred.add_argument("--level", type=float, default=0.95)
    p_pred.add_argument("--target", choices=[k.value for k in TargetKind],
                        default=TargetKind.GROUP_MEAN.value)
    p_pred.add_argument("--rho-grid", type=int, default=100)
    p_pred.add_argument("--m", type=int, default=5000)
    p_pred.add_argument("--burn", type=int, default=1000)
    p_pred.add_argument("--boot-B", type=int, default=500)
    p_pred.add_argument("--eta-se-B", type=int, default=100)
    p_pred.add_argument("--x", default=None,
                        help="comma-separated fixed-effect covariate row")
    p_pred.add_argument("--truth-sigma-alpha2", type=float, default=None)
    p_pred.add_argument("--truth-sigma-eps2", type=float, default=None)

    p_sim = sub.add_parser("simulate", help="run a coverage study from a config")
    p_sim.add_argument("--config", required=True, help="study config JSON path")
    p_sim.add_argument("--threads", type=int, default=None,
                       help="worker processes (overrides MIXEDIM_THREADS and "
                            "the config; default: available parallelism)")
    p_sim.add_argument("--out", default=".", help="output directory")
    return parser


_HANDLERS = {
    "fit": _cmd_fit,
    "contour": _cmd_contour,
    "predict": _cmd_predict,
    "simulate": _cmd_simulate,
}

_ERROR_EXITS = (
    (ParseError, EXIT_PARSE),
    (ValidationError, EXIT_VALIDATION),
    (EstimationError, EXIT_ESTIMATION),
    ((EmptyCut, BracketError), EXIT_CUT),
    ((DomainError, UsageError), EXIT_DOMAIN),
)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args, argv)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        for types, code in _ERROR_EXITS:
            if isinstance(exc, types):
                break
        else:
            code = EXIT_INTERNAL
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "exit_code": code}))
        return code


if __name__ == "__main__":
    sys.exit(main())
