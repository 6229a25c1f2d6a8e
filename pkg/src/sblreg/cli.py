"""Command line interface: fit, simulate, verify, and lasso subcommands.

Every flag has a config-file equivalent (JSON; scalar settings at the top
level under the flag's name, solver knobs under the "em", "lasso", and
"threshold" sections) and an explicit flag always overrides the file.
Outputs are plain CSV and JSON files in --out; reruns with the same inputs
produce byte-identical artifacts except for the timestamp inside each
summary's "meta" block.  Failures print a one-line JSON error report to
stderr naming the stage that failed and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .em import EmConfig, em_fit
from .exceptions import InvalidInputError, SblError
from .lasso import LassoConfig, cv_select
from .model import Dataset
from .simulate import (
    METHODS,
    NULL_RETENTION_REFERENCE,
    ScenarioConfig,
    run_grid,
    run_scenario,
    verify_error_bound_and_signs,
    verify_null_retention,
    write_grid_csv,
    write_metrics_csv,
    write_summary_json,
)
from .threshold import DEFAULT_C_GRID, DEFAULT_MAX_PAIRS, select_threshold

THREADS_ENV_VAR = "SBLREG_THREADS"

# exit codes: 0 success, 1 execution error, 2 argparse usage error,
# 3 verification ran to completion but the check did not pass
EXIT_ERROR = 1
EXIT_CHECK_FAILED = 3

_VERIFY_DEFAULTS = {
    "null-retention": {"n": 64, "p": 64, "s": 4, "a": 3.0, "n_reps": 2000},
    "error-bound": {"n": 256, "p": 128, "s": 8, "a": 3.0, "n_reps": 500},
}


class _Stage:
    """Names the step a subsequent failure gets attributed to."""

    def __init__(self) -> None:
        self.name = "startup"

    def enter(self, name: str) -> None:
        self.name = name


def _looks_like_header(row: list[str]) -> bool:
    for cell in row:
        try:
            float(cell.strip())
        except ValueError:
            return True
    return False


def _parse_matrix(path: str) -> np.ndarray:
    """CSV file to float matrix with cell-level error locations.

    A first row containing any non-numeric cell is taken as a header.
    float() parsing is locale independent; non-finite entries and ragged
    rows are rejected with the offending file row (1-based, header
    included) and column.
    """
    rows: list[list[float]] = []
    width = None
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if i == 1 and _looks_like_header(row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise InvalidInputError(
                    f"{path} row {i} has {len(row)} columns, expected {width}")
            values = []
            for j, cell in enumerate(row, start=1):
                text = cell.strip()
                try:
                    value = float(text)
                except ValueError:
                    raise InvalidInputError(
                        f"{path} row {i} column {j}: could not parse {text!r} "
                        "as a number") from None
                if not math.isfinite(value):
                    raise InvalidInputError(
                        f"{path} row {i} column {j}: non-finite value {text!r}")
                values.append(value)
            rows.append(values)
    if not rows:
        raise InvalidInputError(f"{path} contains no data rows")
    return np.array(rows, dtype=float)


def load_csv_dataset(x_path: str, y_path: str) -> Dataset:
    """Design-matrix and response CSVs to a validated Dataset."""
    x = _parse_matrix(x_path)
    y = _parse_matrix(y_path)
    if y.shape[1] != 1:
        raise InvalidInputError(
            f"{y_path} must have exactly one column, got {y.shape[1]}")
    if y.shape[0] != x.shape[0]:
        raise InvalidInputError(
            f"{x_path} has {x.shape[0]} rows but {y_path} has {y.shape[0]}")
    return Dataset(y=y[:, 0], X=x)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise InvalidInputError(f"{path} must hold a JSON object at the top level")
    return cfg


def _setting(args: argparse.Namespace, cfg: dict, name: str, default):
    """Flag value if given, else config-file value, else default."""
    flag = getattr(args, name, None)
    if flag is not None:
        return flag
    return cfg.get(name, default)


def _section(cfg: dict, name: str, cls):
    body = cfg.get(name, {})
    if not isinstance(body, dict):
        raise InvalidInputError(f"config section {name!r} must be a JSON object")
    try:
        return cls(**body)
    except TypeError as exc:
        raise InvalidInputError(f"config section {name!r}: {exc}") from None


def _threshold_settings(cfg: dict) -> dict:
    body = cfg.get("threshold", {})
    if not isinstance(body, dict):
        raise InvalidInputError("config section 'threshold' must be a JSON object")
    allowed = {"rho_hat", "max_pairs", "bic_squared"}
    unknown = set(body) - allowed
    if unknown:
        raise InvalidInputError(
            f"config section 'threshold': unknown keys {sorted(unknown)}")
    return {
        "rho_hat": body.get("rho_hat"),
        "max_pairs": body.get("max_pairs", DEFAULT_MAX_PAIRS),
        "bic_squared": bool(body.get("bic_squared", True)),
    }


def _float_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(part) for part in str(text).split(",") if part.strip()]


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(part) for part in str(text).split(",") if part.strip()]


def _methods(value) -> tuple[str, ...]:
    if isinstance(value, str):
        value = [part.strip() for part in value.split(",") if part.strip()]
    methods = tuple(value)
    for m in methods:
        if m not in METHODS:
            raise InvalidInputError(f"unknown method {m!r}, expected subset of {METHODS}")
    return methods


def _resolve_threads(args: argparse.Namespace, cfg: dict) -> int:
    if getattr(args, "threads", None) is not None:
        return int(args.threads)
    if "threads" in cfg:
        return int(cfg["threads"])
    env = os.environ.get(THREADS_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise InvalidInputError(
                f"{THREADS_ENV_VAR} must be an integer, got {env!r}") from None
    return 1


def _out_dir(args: argparse.Namespace, cfg: dict) -> Path:
    out = Path(_setting(args, cfg, "out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_paths(args: argparse.Namespace, cfg: dict, command: str) -> tuple[str, str]:
    x_path = _setting(args, cfg, "x", None)
    y_path = _setting(args, cfg, "y", None)
    if x_path is None or y_path is None:
        raise InvalidInputError(f"{command} requires --x and --y (or config keys)")
    return str(x_path), str(y_path)


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_json(payload: dict, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _wrote(path: Path) -> None:
    print(f"wrote {path}")


def _report_error(stage: str, exc: Exception) -> None:
    payload = {"error": {"stage": stage, "type": type(exc).__name__,
                         "message": str(exc)}}
    json.dump(payload, sys.stderr, sort_keys=True)
    sys.stderr.write("\n")


def _cmd_fit(args: argparse.Namespace, stage: _Stage) -> int:
    stage.enter("config")
    cfg = _load_config(args.config)
    em_cfg = _section(cfg, "em", EmConfig)
    thr = _threshold_settings(cfg)
    fixed_sigma2 = _setting(args, cfg, "fixed_sigma2", None)
    if fixed_sigma2 is not None:
        fixed_sigma2 = float(fixed_sigma2)
        if em_cfg.estimate_sigma2:
            em_cfg = replace(em_cfg, estimate_sigma2=False)
    c_grid = tuple(_float_list(_setting(args, cfg, "c_grid", DEFAULT_C_GRID)))
    seed = int(_setting(args, cfg, "seed", 0))
    out = _out_dir(args, cfg)

    stage.enter("load-data")
    data = load_csv_dataset(*_dataset_paths(args, cfg, "fit"))

    stage.enter("fit")
    fit = em_fit(data, cfg=em_cfg, fixed_sigma2=fixed_sigma2)

    stage.enter("threshold")
    tfit = select_threshold(data, fit, c_grid, rho_hat=thr["rho_hat"],
                            max_pairs=thr["max_pairs"], seed=seed,
                            bic_squared=thr["bic_squared"])

    stage.enter("write-output")
    coef_path = out / "fit_coefficients.csv"
    with open(coef_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "beta_hat", "gamma_hat", "beta_tilde", "gamma_tilde"])
        for j in range(data.p):
            writer.writerow([j, repr(float(fit.beta_hat[j])),
                             repr(float(fit.hp.gamma[j])),
                             repr(float(tfit.beta_tilde[j])),
                             repr(float(tfit.hp_tilde.gamma[j]))])
    summary = {
        "n": data.n,
        "p": data.p,
        "sigma2_hat": float(fit.hp.sigma2),
        "sigma2_estimated": bool(em_cfg.estimate_sigma2),
        "converged": bool(fit.converged),
        "iters": int(fit.iters),
        "ell_trace": [float(v) for v in fit.ell_trace],
        "pruned": [int(j) for j in fit.pruned],
        "support_size": int(np.sum(fit.hp.gamma > 0.0)),
        "threshold": {
            "c": float(tfit.config.c),
            "rho_hat": float(tfit.config.rho_hat),
            "z_star": float(tfit.config.z_star),
            "bic": float(tfit.bic),
            "kept": [int(j) for j in tfit.kept],
        },
        "meta": {"timestamp": _timestamp()},
    }
    summary_path = out / "fit_summary.json"
    _write_json(summary, summary_path)
    _wrote(coef_path)
    _wrote(summary_path)
    print(f"sigma2_hat {fit.hp.sigma2:.6g}  support {summary['support_size']}  "
          f"kept after thresholding {len(tfit.kept)}")
    return 0


def _cmd_lasso(args: argparse.Namespace, stage: _Stage) -> int:
    stage.enter("config")
    cfg = _load_config(args.config)
    lasso_cfg = _section(cfg, "lasso", LassoConfig)
    seed = int(_setting(args, cfg, "seed", 0))
    out = _out_dir(args, cfg)

    stage.enter("load-data")
    data = load_csv_dataset(*_dataset_paths(args, cfg, "lasso"))

    stage.enter("lasso")
    fit = cv_select(data, lasso_cfg, seed=seed)

    stage.enter("write-output")
    path_csv = out / "lasso_path.csv"
    with open(path_csv, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lambda", "cv_mean", "cv_se", "nonzeros"])
        for l, lam in enumerate(fit.lambda_path):
            writer.writerow([repr(float(lam)), repr(float(fit.cv_mean[l])),
                             repr(float(fit.cv_se[l])),
                             int(np.sum(fit.beta_path[:, l] != 0.0))])
    coef_path = out / "lasso_coefficients.csv"
    with open(coef_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "beta_hat"])
        for j in range(data.p):
            writer.writerow([j, repr(float(fit.beta_hat[j]))])
    summary = {
        "n": data.n,
        "p": data.p,
        "k_folds": int(lasso_cfg.k_folds),
        "n_lambda": len(fit.lambda_path),
        "lambda_max": float(fit.lambda_path[0]),
        "lambda_min": float(fit.lambda_path[-1]),
        "selected_lambda": float(fit.selected_lambda),
        "selected_nonzeros": int(np.sum(fit.beta_hat != 0.0)),
        "meta": {"timestamp": _timestamp()},
    }
    summary_path = out / "lasso_summary.json"
    _write_json(summary, summary_path)
    _wrote(path_csv)
    _wrote(coef_path)
    _wrote(summary_path)
    print(f"selected lambda {fit.selected_lambda:.6g}  "
          f"nonzeros {summary['selected_nonzeros']}")
    return 0


def _scenario_value(args: argparse.Namespace, sc: dict, name: str, default):
    flag = getattr(args, name, None)
    if flag is not None:
        return flag
    return sc.get(name, default)


def _cmd_simulate(args: argparse.Namespace, stage: _Stage) -> int:
    stage.enter("config")
    cfg = _load_config(args.config)
    sc = cfg.get("scenario", {})
    if not isinstance(sc, dict):
        raise InvalidInputError("config section 'scenario' must be a JSON object")
    n = _scenario_value(args, sc, "n", None)
    p = _scenario_value(args, sc, "p", None)
    if n is None or p is None:
        raise InvalidInputError("simulate requires n and p (flags or config)")
    n, p = int(n), int(p)
    s = int(_scenario_value(args, sc, "s", 0))
    sigma_star = float(_scenario_value(args, sc, "sigma_star", 1.0))
    n_reps = int(_scenario_value(args, sc, "n_reps", 1))
    design_kind = str(_scenario_value(args, sc, "design_kind", "equicorrelated-gaussian"))
    random_signs = bool(_scenario_value(args, sc, "random_signs", False))
    x_csv = _scenario_value(args, sc, "x_csv", None)
    seed = int(_setting(args, cfg, "seed", 0))
    threads = _resolve_threads(args, cfg)
    methods = _methods(_setting(args, cfg, "method", METHODS))
    em_cfg = _section(cfg, "em", EmConfig)
    lasso_cfg = _section(cfg, "lasso", LassoConfig) if "lasso" in cfg else None
    c_grid = tuple(_float_list(_setting(args, cfg, "c_grid", DEFAULT_C_GRID)))
    fixed_sigma2 = _setting(args, cfg, "fixed_sigma2", None)
    if fixed_sigma2 is not None:
        fixed_sigma2 = float(fixed_sigma2)
        if em_cfg.estimate_sigma2:
            em_cfg = replace(em_cfg, estimate_sigma2=False)
    record_runtime = bool(_setting(args, cfg, "record_runtime", False))
    out = _out_dir(args, cfg)

    rho_values = _scenario_value(args, sc, "rho_values", None)
    s_values = _scenario_value(args, sc, "s_values", None)
    a_values = _scenario_value(args, sc, "a_values", None)
    grid_mode = any(v is not None for v in (rho_values, s_values, a_values))

    stage.enter("simulate")
    if grid_mode:
        rho_list = _float_list(rho_values) if rho_values is not None else \
            [float(_scenario_value(args, sc, "rho", 0.0))]
        s_list = _int_list(s_values) if s_values is not None else [s]
        a_list = _float_list(a_values) if a_values is not None else \
            [float(_scenario_value(args, sc, "a", 0.0))]
        rows = run_grid(n, p, rho_list, s_list, a_list, n_reps, seed, methods,
                        design_kind=design_kind, em_cfg=em_cfg,
                        lasso_cfg=lasso_cfg, c_grid=c_grid,
                        fixed_sigma2=fixed_sigma2, threads=threads)
        stage.enter("write-output")
        grid_path = out / "grid.csv"
        write_grid_csv(rows, grid_path)
        summary = {
            "grid": {"n": n, "p": p, "rho_values": rho_list, "s_values": s_list,
                     "a_values": a_list, "n_reps": n_reps, "seed": seed,
                     "design_kind": design_kind, "methods": list(methods)},
            "cells": len(rho_list) * len(s_list) * len(a_list),
            "meta": {"timestamp": _timestamp()},
        }
        summary_path = out / "summary.json"
        _write_json(summary, summary_path)
        _wrote(grid_path)
        _wrote(summary_path)
        return 0

    scenario = ScenarioConfig(
        n=n, p=p, rho=float(_scenario_value(args, sc, "rho", 0.0)), s=s,
        a=float(_scenario_value(args, sc, "a", 0.0)), sigma_star=sigma_star,
        n_reps=n_reps, seed=seed, design_kind=design_kind,
        random_signs=random_signs,
        x_csv=str(x_csv) if x_csv is not None else None,
    )
    result = run_scenario(scenario, methods, em_cfg=em_cfg, lasso_cfg=lasso_cfg,
                          c_grid=c_grid, fixed_sigma2=fixed_sigma2,
                          record_runtime=record_runtime, threads=threads)
    stage.enter("write-output")
    metrics_path = out / "metrics.csv"
    write_metrics_csv(result.records, metrics_path)
    summary = dict(result.summary)
    summary["meta"] = dict(summary["meta"], timestamp=_timestamp())
    summary_path = out / "summary.json"
    write_summary_json(summary, summary_path)
    _wrote(metrics_path)
    _wrote(summary_path)
    return 0


def _cmd_verify(args: argparse.Namespace, stage: _Stage) -> int:
    stage.enter("config")
    cfg = _load_config(args.config)
    defaults = _VERIFY_DEFAULTS[args.check]
    sc = cfg.get("scenario", {})
    if not isinstance(sc, dict):
        raise InvalidInputError("config section 'scenario' must be a JSON object")
    scenario = ScenarioConfig(
        n=int(_scenario_value(args, sc, "n", defaults["n"])),
        p=int(_scenario_value(args, sc, "p", defaults["p"])),
        rho=0.0,
        s=int(_scenario_value(args, sc, "s", defaults["s"])),
        a=float(_scenario_value(args, sc, "a", defaults["a"])),
        sigma_star=float(_scenario_value(args, sc, "sigma_star", 1.0)),
        n_reps=int(_scenario_value(args, sc, "n_reps", defaults["n_reps"])),
        seed=int(_setting(args, cfg, "seed", 0)),
        design_kind="exact-orthogonal",
    )
    em_cfg = _section(cfg, "em", EmConfig)
    threads = _resolve_threads(args, cfg)
    out = _out_dir(args, cfg)

    stage.enter("verify")
    if args.check == "null-retention":
        tolerance = float(_setting(args, cfg, "tolerance", 0.01))
        result = verify_null_retention(scenario, em_cfg=em_cfg, threads=threads)
        passed = abs(result.em_zero_freq - result.reference) <= tolerance
        report = {
            "check": "null-retention",
            "scenario": asdict(scenario),
            "result": asdict(result),
            "tolerance": tolerance,
            "passed": bool(passed),
            "meta": {"timestamp": _timestamp()},
        }
        line = (f"null retention {result.em_zero_freq:.6f} "
                f"(reference {result.reference:.6f}, tolerance {tolerance})")
    else:
        c0 = float(_setting(args, cfg, "c0", 3.0))
        min_bound_rate = float(_setting(args, cfg, "min_bound_rate", 0.99))
        min_sign_rate = float(_setting(args, cfg, "min_sign_rate", 0.95))
        result = verify_error_bound_and_signs(scenario, c0, em_cfg=em_cfg,
                                              threads=threads)
        passed = (result.bound_pass_rate >= min_bound_rate
                  and (math.isnan(result.sign_pass_rate)
                       or result.sign_pass_rate >= min_sign_rate))
        report = {
            "check": "error-bound",
            "scenario": asdict(scenario),
            "result": asdict(result),
            "min_bound_rate": min_bound_rate,
            "min_sign_rate": min_sign_rate,
            "passed": bool(passed),
            "meta": {"timestamp": _timestamp()},
        }
        line = (f"error bound pass rate {result.bound_pass_rate:.4f} "
                f"(floor {result.probability_floor:.6f}), "
                f"sign pass rate {result.sign_pass_rate:.4f}")

    stage.enter("write-output")
    report_path = out / "verify_report.json"
    _write_json(report, report_path)
    _wrote(report_path)
    print(f"{line}  {'PASS' if passed else 'FAIL'}")
    return 0 if passed else EXIT_CHECK_FAILED


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", help="output directory (default: current directory)")
    parser.add_argument("--config",
                        help="JSON config file; explicit flags override its values")
    parser.add_argument("--seed", type=int, help="base RNG seed (default 0)")
    parser.add_argument("--threads", type=int,
                        help="worker threads for replication-level parallelism "
                             f"(default: ${THREADS_ENV_VAR} or 1)")


def _add_data(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--x", help="design matrix CSV, one row per observation")
    parser.add_argument("--y", help="response CSV, one column")


def _add_scenario(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n", type=int, help="observations per replication")
    parser.add_argument("--p", type=int, help="number of predictors")
    parser.add_argument("--s", type=int, help="true support size")
    parser.add_argument("--a", type=float, help="signal magnitude floor")
    parser.add_argument("--sigma-star", type=float, dest="sigma_star",
                        help="true noise standard deviation")
    parser.add_argument("--n-reps", type=int, dest="n_reps",
                        help="number of replications")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sblreg",
        description="Sparse Bayesian regression: evidence maximization, "
                    "hard thresholding, and a cross-validated lasso baseline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a CSV dataset and threshold the result")
    _add_common(fit)
    _add_data(fit)
    fit.add_argument("--fixed-sigma2", type=float, dest="fixed_sigma2",
                     help="hold the noise variance fixed at this value")
    fit.add_argument("--c-grid", dest="c_grid",
                     help="comma-separated threshold constants")

    lasso = sub.add_parser("lasso", help="cross-validated lasso on a CSV dataset")
    _add_common(lasso)
    _add_data(lasso)

    sim = sub.add_parser("simulate", help="synthetic replications of one scenario "
                                          "or a (rho, s, a) grid")
    _add_common(sim)
    _add_scenario(sim)
    sim.add_argument("--rho", type=float, help="design equicorrelation")
    sim.add_argument("--design-kind", dest="design_kind",
                     choices=["equicorrelated-gaussian", "exact-orthogonal",
                              "external-csv"],
                     help="design sampler")
    sim.add_argument("--x-csv", dest="x_csv",
                     help="design matrix CSV for --design-kind external-csv")
    sim.add_argument("--random-signs", dest="random_signs", action="store_true",
                     default=None, help="flip signal signs at random")
    sim.add_argument("--method", help="comma-separated subset of "
                                      f"{', '.join(METHODS)} (default: all)")
    sim.add_argument("--fixed-sigma2", type=float, dest="fixed_sigma2",
                     help="hold the noise variance fixed at this value")
    sim.add_argument("--c-grid", dest="c_grid",
                     help="comma-separated threshold constants")
    sim.add_argument("--record-runtime", dest="record_runtime",
                     action="store_true", default=None,
                     help="write per-method wall times into the metrics table")
    sim.add_argument("--rho-values", dest="rho_values",
                     help="comma-separated rho grid (enables grid mode)")
    sim.add_argument("--s-values", dest="s_values",
                     help="comma-separated support-size grid (enables grid mode)")
    sim.add_argument("--a-values", dest="a_values",
                     help="comma-separated signal-strength grid (enables grid mode)")

    verify = sub.add_parser("verify", help="distributional checks on "
                                           "exact-orthogonal designs")
    _add_common(verify)
    _add_scenario(verify)
    verify.add_argument("--check", required=True,
                        choices=["null-retention", "error-bound"],
                        help="which property to check")
    verify.add_argument("--tolerance", type=float,
                        help="null-retention: allowed deviation from the "
                             f"{NULL_RETENTION_REFERENCE:.4f} reference (default 0.01)")
    verify.add_argument("--c0", type=float,
                        help="error-bound: threshold constant, must exceed 2 "
                             "(default 3)")
    verify.add_argument("--min-bound-rate", type=float, dest="min_bound_rate",
                        help="error-bound: required bound pass rate (default 0.99)")
    verify.add_argument("--min-sign-rate", type=float, dest="min_sign_rate",
                        help="error-bound: required sign pass rate (default 0.95)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"fit": _cmd_fit, "lasso": _cmd_lasso,
                "simulate": _cmd_simulate, "verify": _cmd_verify}
    stage = _Stage()
    try:
        return handlers[args.command](args, stage)
    except (SblError, OSError, ValueError) as exc:
        _report_error(stage.name, exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
