"""Command-line front end: estimate on CSV panels, run studies, dump bases.

Exit codes: 0 on success, 2 for input problems (bad flags, missing or
malformed files), 3 for numerical failure (no penalty level produced a
usable fit). Every output directory receives a manifest.json holding the
command, the fully resolved configuration, and all paths, so a run can be
reproduced from the manifest alone.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .grouping import coef_path
from .inference import HacConfig, coef_covariance, default_window
from .panel import PanelFormatError, load_csv
from .selection import (
    default_interior_knots,
    lambda_grid,
    select_lambda,
)
from .simulation import DgpSpec, default_study_grid, run_study
from .solver import (
    FitConfig,
    PenaltyRule,
    RankDeficientUnitError,
    SingularGroupError,
)
from .splines import SplineConfig, build_knots, basis_matrix

PATH_POINTS = 101


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _resolve_threads(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("FUSE_TIME_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _parse_lambda_grid(text: str) -> np.ndarray:
    parts = text.split(":")
    if len(parts) not in (3, 4):
        raise ValueError("expected lo:hi:n or lo:hi:n:log|lin")
    lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    log = True
    if len(parts) == 4:
        if parts[3] not in ("log", "lin"):
            raise ValueError("spacing must be 'log' or 'lin'")
        log = parts[3] == "log"
    if log and lo <= 0 and n > 1:
        log = False  # a grid touching 0 cannot be log-spaced
    return lambda_grid(lo, hi, n, log=log)


def _write_manifest(out_dir: str, command: str, argv, config: dict, paths: dict):
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config": config,
        "paths": paths,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fit_config(args) -> FitConfig:
    return FitConfig(
        kappa=args.kappa,
        admm_penalty=args.theta if args.theta is not None else 1.0,
        max_iter=args.max_iter,
        tol_admm=args.tol,
        tol_group=args.tol_group,
        min_group_share=args.min_share,
    )


def cmd_estimate(args, argv) -> int:
    try:
        panel = load_csv(args.input, intercept_only=args.intercept_only)
    except (OSError, PanelFormatError) as exc:
        return _fail(str(exc), 2)

    t_eff = max(int(round(panel.total_obs / panel.n_units)), 2)
    knots = (
        args.knots
        if args.knots is not None
        else default_interior_knots(panel.n_units, t_eff, panel.n_covariates)
    )
    try:
        basis = SplineConfig(degree=args.degree, interior_knots=knots)
        config = _fit_config(args)
        grid = (
            _parse_lambda_grid(args.lambda_grid)
            if args.lambda_grid
            else lambda_grid(0.01, 50.0, 50, log=True)
        )
    except ValueError as exc:
        return _fail(str(exc), 2)

    threads = _resolve_threads(args.threads)
    try:
        sel = select_lambda(
            panel, basis, grid, config, rho=args.rho, n_jobs=threads
        )
    except (RankDeficientUnitError, SingularGroupError, RuntimeError) as exc:
        return _fail(str(exc), 3)

    os.makedirs(args.output_dir, exist_ok=True)
    fit = sel.best_fit
    design = sel.design
    state = fit.state

    fit_payload = {
        "n_units": design.n_units,
        "n_groups": fit.partition.n_groups,
        "unit_ids": [str(u) for u in design.unit_ids],
        "labels": fit.partition.labels.tolist(),
        "group_sizes": fit.partition.sizes.tolist(),
        "best_lambda": sel.best_lambda,
        "rho": sel.rho,
        "sigma2": fit.sigma2,
        "post_coefs": fit.post_coefs.tolist(),
        "pse_coefs": fit.pse_coefs.tolist(),
        "basis": {
            "degree": basis.degree,
            "interior_knots": basis.interior_knots,
            "size": basis.basis_size,
        },
        "diagnostics": {
            "iterations": state.iterations if state else None,
            "primal_residual": state.primal_residual if state else None,
            "dual_residual": state.dual_residual if state else None,
            "converged": state.converged if state else None,
            "min_share_warning": fit.min_share_warning,
        },
        "selection_messages": list(sel.messages),
    }
    with open(os.path.join(args.output_dir, "fit.json"), "w") as fh:
        json.dump(fit_payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

    v_grid = np.linspace(0.0, 1.0, args.path_points)
    se_by_group = None
    if args.se:
        hac = HacConfig(
            window=(
                args.hac_window
                if args.hac_window is not None
                else default_window(design.total_obs / design.n_units)
            )
        )
        se_by_group = [
            coef_covariance(design, fit, k, v_grid, hac).stderr()
            for k in range(fit.partition.n_groups)
        ]
    with open(os.path.join(args.output_dir, "coef_paths.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["v", "group", "coef_index", "value"]
        if args.se:
            header.append("se")
        writer.writerow(header)
        for k in range(fit.partition.n_groups):
            path = coef_path(fit.post_coefs, design, k, v_grid)
            for g, v in enumerate(v_grid):
                for j in range(design.n_covariates):
                    row = [f"{v:.10g}", k, j, f"{path[g, j]:.12g}"]
                    if args.se:
                        row.append(f"{se_by_group[k][g, j]:.12g}")
                    writer.writerow(row)

    with open(os.path.join(args.output_dir, "ic_trace.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "ic", "k_hat"])
        for lam, ic, k in zip(sel.grid, sel.ic_values, sel.k_values):
            writer.writerow(
                [
                    f"{lam:.12g}",
                    "" if np.isnan(ic) else f"{ic:.12g}",
                    "" if np.isnan(k) else int(k),
                ]
            )

    _write_manifest(
        args.output_dir,
        "estimate",
        argv,
        {
            "degree": basis.degree,
            "interior_knots": basis.interior_knots,
            "lambda_grid": [float(g) for g in grid],
            "rho": sel.rho,
            "kappa": config.kappa,
            "theta": config.admm_penalty,
            "max_iter": config.max_iter,
            "tol": config.tol_admm,
            "tol_group": config.tol_group,
            "min_share": config.min_group_share,
            "intercept_only": args.intercept_only,
            "se": args.se,
            "path_points": args.path_points,
            "threads": threads,
        },
        {
            "input": os.path.abspath(args.input),
            "output_dir": os.path.abspath(args.output_dir),
            "outputs": ["fit.json", "coef_paths.csv", "ic_trace.csv"],
        },
    )
    sizes = ",".join(str(s) for s in fit.partition.sizes)
    print(
        f"estimated {fit.partition.n_groups} groups (sizes {sizes}) at "
        f"lambda={sel.best_lambda:g}; outputs in {args.output_dir}"
    )
    return 0


def cmd_simulate(args, argv) -> int:
    try:
        spec = DgpSpec(
            dgp_id=args.dgp,
            n_units=args.n,
            n_periods=args.t,
            errors=args.errors,
            missing_share=args.missing,
        )
        grid = (
            _parse_lambda_grid(args.lambda_grid)
            if args.lambda_grid
            else default_study_grid(spec)
        )
        config = _fit_config(args)
    except ValueError as exc:
        return _fail(str(exc), 2)

    threads = _resolve_threads(args.threads)
    rule = PenaltyRule((), (args.theta,)) if args.theta is not None else None
    try:
        report = run_study(
            spec,
            reps=args.reps,
            grid=grid,
            config=config,
            seed=args.seed,
            interior_knots=args.knots,
            degree=args.degree,
            rho=args.rho,
            n_workers=threads,
            penalty_rule=rule,
        )
    except RuntimeError as exc:
        return _fail(str(exc), 3)

    os.makedirs(args.output_dir, exist_ok=True)
    with open(os.path.join(args.output_dir, "report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    keys: list = []
    for rec in report.records:
        for key in rec:
            if key not in keys:
                keys.append(key)
    with open(
        os.path.join(args.output_dir, "replications.csv"), "w", newline=""
    ) as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, restval="")
        writer.writeheader()
        writer.writerows(report.records)

    _write_manifest(
        args.output_dir,
        "simulate",
        argv,
        {
            "dgp": spec.dgp_id,
            "n": spec.n_units,
            "t": spec.n_periods,
            "errors": spec.errors,
            "missing": spec.missing_share,
            "reps": args.reps,
            "seed": args.seed,
            "degree": report.degree,
            "interior_knots": report.interior_knots,
            "lambda_grid": [float(g) for g in grid],
            "rho": args.rho,
            "kappa": config.kappa,
            "theta": args.theta,  # null: calibrated per-design schedule
            "max_iter": config.max_iter,
            "tol": config.tol_admm,
            "tol_group": config.tol_group,
            "min_share": config.min_group_share,
            "threads": threads,
        },
        {
            "output_dir": os.path.abspath(args.output_dir),
            "outputs": ["report.json", "replications.csv"],
        },
    )
    print(
        f"{report.completed}/{report.reps} replications: "
        f"freq_correct_k={report.freq_correct_k:.3f} "
        f"mean_ari={report.mean_ari:.3f} mean_k={report.mean_k:.3f}"
    )
    return 0


def cmd_basis(args, argv) -> int:
    try:
        config = SplineConfig(degree=args.degree, interior_knots=args.knots)
        if args.grid < 2:
            raise ValueError("grid must have at least 2 points")
    except ValueError as exc:
        return _fail(str(exc), 2)
    knots = build_knots(config)
    v = np.linspace(0.0, 1.0, args.grid)
    values = basis_matrix(knots, config.degree, v)

    def write_rows(fh):
        writer = csv.writer(fh)
        writer.writerow(["v"] + [f"b{m + 1}" for m in range(config.basis_size)])
        for g in range(len(v)):
            writer.writerow(
                [f"{v[g]:.10g}"] + [f"{val:.12g}" for val in values[g]]
            )

    if args.output:
        out_dir = os.path.dirname(os.path.abspath(args.output))
        os.makedirs(out_dir, exist_ok=True)
        with open(args.output, "w", newline="") as fh:
            write_rows(fh)
        _write_manifest(
            out_dir,
            "basis",
            argv,
            {
                "degree": config.degree,
                "interior_knots": config.interior_knots,
                "grid": args.grid,
            },
            {"output": os.path.abspath(args.output)},
        )
    else:
        write_rows(sys.stdout)
    return 0


def _add_solver_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--degree", type=int, default=3, help="spline degree")
    parser.add_argument(
        "--knots",
        type=int,
        default=None,
        help="interior knot count (default: sample-size heuristic)",
    )
    parser.add_argument(
        "--lambda-grid",
        default=None,
        metavar="LO:HI:N[:log|lin]",
        help="penalty grid specification",
    )
    parser.add_argument("--rho", type=float, default=None, help="criterion scale")
    parser.add_argument("--kappa", type=float, default=2.0, help="weight exponent")
    parser.add_argument(
        "--theta",
        type=float,
        default=None,
        help="ADMM step size (default 1.0; simulate uses a calibrated "
        "per-design schedule unless set explicitly)",
    )
    parser.add_argument("--max-iter", type=int, default=50_000)
    parser.add_argument("--tol", type=float, default=1e-10, help="ADMM tolerance")
    parser.add_argument("--tol-group", type=float, default=1e-3)
    parser.add_argument("--min-share", type=float, default=0.05)
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker cap (default: FUSE_TIME_THREADS or all cores)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusetime",
        description=(
            "Joint estimation of latent groups and smoothly time-varying "
            "coefficients in panel data"
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="fit a CSV panel")
    est.add_argument("--input", required=True, help="long-format CSV panel")
    est.add_argument("--output-dir", required=True)
    est.add_argument(
        "--intercept-only",
        action="store_true",
        help="model a pure trend: ignore x columns and regress on 1",
    )
    est.add_argument("--se", action="store_true", help="append SE column")
    est.add_argument("--hac-window", type=int, default=None)
    est.add_argument("--path-points", type=int, default=PATH_POINTS)
    _add_solver_flags(est)

    sim = sub.add_parser("simulate", help="run a seeded Monte Carlo study")
    sim.add_argument("--dgp", type=int, required=True, choices=(1, 2, 3))
    sim.add_argument("--n", type=int, required=True, help="units")
    sim.add_argument("--t", type=int, required=True, help="periods")
    sim.add_argument("--reps", type=int, required=True)
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--errors", choices=("iid", "ar1"), default="iid")
    sim.add_argument("--missing", type=float, default=0.0)
    sim.add_argument("--output-dir", required=True)
    _add_solver_flags(sim)

    bas = sub.add_parser("basis", help="tabulate the spline basis on a grid")
    bas.add_argument("--degree", type=int, required=True)
    bas.add_argument("--knots", type=int, required=True)
    bas.add_argument("--grid", type=int, required=True)
    bas.add_argument("--output", default=None, help="CSV path (default stdout)")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "estimate":
        return cmd_estimate(args, argv)
    if args.command == "simulate":
        return cmd_simulate(args, argv)
    return cmd_basis(args, argv)


if __name__ == "__main__":
    sys.exit(main())
