"""Penalty selection by a BIC-type information criterion.

The preliminary estimate, the adaptive weights, and the step-1 factorization
are all independent of the penalty level, so they are computed once and
shared across the grid; candidate fits differ only through lam.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .grouping import GroupedFit, grouped_fit
from .panel import Panel, build_design
from .solver import (
    FitConfig,
    Step1Solver,
    adaptive_weights,
    admm_fit,
    denoised_weights,
    preliminary_ols,
)
from .splines import SplineConfig


@dataclass(frozen=True)
class SelectionResult:
    """Outcome of a grid search over the fusion penalty.

    ic_values and k_values align with grid; entries for failed fits are nan.
    messages records one line per skipped grid point.
    """

    grid: np.ndarray
    ic_values: np.ndarray
    k_values: np.ndarray
    best_lambda: float
    best_fit: GroupedFit
    rho: float
    design: object = None
    messages: tuple = ()
    fits: tuple | None = None


def information_criterion(fit: GroupedFit, rho: float, p: int, m: int) -> float:
    """ln(sigma2) + rho * p * m * K, with sigma2 the post-refit MSE.

    A perfect fit (sigma2 == 0) has no finite log; return -inf as the
    sentinel, flagged through a warning, so a minimizing search still
    prefers it deterministically.
    """
    k = fit.partition.n_groups
    if fit.sigma2 <= 0.0:
        warnings.warn(
            "perfect in-sample fit: residual variance is zero, criterion "
            "set to -inf",
            RuntimeWarning,
            stacklevel=2,
        )
        return -math.inf
    return math.log(fit.sigma2) + rho * p * m * k


def default_rho(n_units: int, t_per_unit: float) -> float:
    """Penalty scale 0.04 * log(S) / sqrt(S) with S = n_units * t_per_unit.

    For an unbalanced panel pass the average number of observed periods per
    unit, which makes S the total observation count.
    """
    s = float(n_units) * float(t_per_unit)
    if s <= 1.0:
        raise ValueError("need more than one observation in total")
    return 0.04 * math.log(s) / math.sqrt(s)


def default_interior_knots(n_units: int, n_periods: int, p: int) -> int:
    """Sample-size heuristic floor((N*T)^(1/7) - log(p)), floored at 1."""
    if min(n_units, n_periods, p) < 1:
        raise ValueError("n_units, n_periods, and p must be >= 1")
    value = (n_units * n_periods) ** (1.0 / 7.0) - math.log(p)
    return max(int(math.floor(value)), 1)


def lambda_grid(lo: float, hi: float, n: int, log: bool = True) -> np.ndarray:
    """Candidate penalty levels, log-spaced by default."""
    if n < 1 or lo < 0 or hi < lo:
        raise ValueError("need n >= 1 and 0 <= lo <= hi")
    if n == 1:
        return np.array([lo])
    if log:
        if lo <= 0:
            raise ValueError("log spacing needs lo > 0")
        return np.geomspace(lo, hi, n)
    return np.linspace(lo, hi, n)


def fit_single_lambda(design, weights, config, lam, init, step1) -> GroupedFit:
    """One penalized fit at `lam` with shared weights and factorization."""
    cfg = dataclasses.replace(config, lam=float(lam))
    pi_hat, state = admm_fit(design, weights, cfg, init=init, step1=step1)
    return grouped_fit(design, pi_hat, state, cfg.tol_group, cfg.min_group_share)


def select_lambda(
    panel: Panel,
    basis: SplineConfig,
    grid,
    config: FitConfig,
    rho: float | None = None,
    n_jobs: int = 1,
    keep_fits: bool = False,
    penalty_rule=None,
    weight_rule: str = "plugin",
) -> SelectionResult:
    """Fit every grid point, score by the criterion, return the argmin.

    Ties break toward the smaller penalty. Grid points whose fit fails are
    skipped with a recorded message; only a fully failed grid raises.

    `penalty_rule`, when given, maps each grid value to the ADMM step size
    to use there (see PenaltyRule); for converged fits it affects iteration
    counts only, not the minimizer. Without it every fit uses
    `config.admm_penalty`.

    `weight_rule` picks how adaptive weights are formed from the
    preliminary estimates: "plugin" (default) uses raw pairwise distances,
    "denoised" uses debiased fit-norm distances (see denoised_weights),
    which keep their contrast when preliminary noise is comparable to the
    group separation. The penalty scale differs between the two, so a grid
    calibrated for one is not meaningful for the other.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty penalty grid")
    if np.any(grid < 0):
        raise ValueError("penalty levels must be >= 0")

    design = build_design(panel, basis)
    if rho is None:
        rho = default_rho(design.n_units, design.total_obs / design.n_units)
    prelim = preliminary_ols(design)
    if weight_rule == "plugin":
        weights = adaptive_weights(prelim, config.kappa)
    elif weight_rule == "denoised":
        weights = denoised_weights(design, prelim, config.kappa)
    else:
        raise ValueError(f"unknown weight_rule {weight_rule!r}")
    if penalty_rule is None:
        thetas = [float(config.admm_penalty)] * grid.size
    else:
        thetas = [float(penalty_rule(lam)) for lam in grid]
    step1 = {th: Step1Solver(design, th) for th in sorted(set(thetas))}
    p, m = design.n_covariates, design.basis_size

    def one(lam, theta):
        cfg = dataclasses.replace(config, admm_penalty=theta)
        return fit_single_lambda(design, weights, cfg, lam, prelim, step1[theta])

    fits: list = [None] * grid.size
    messages: list = []
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            futures = [
                pool.submit(one, lam, th) for lam, th in zip(grid, thetas)
            ]
            for idx, fut in enumerate(futures):
                try:
                    fits[idx] = fut.result()
                except Exception as exc:  # noqa: BLE001 - recorded, not fatal
                    messages.append(f"lambda={grid[idx]:g} skipped: {exc}")
    else:
        for idx, lam in enumerate(grid):
            try:
                fits[idx] = one(lam, thetas[idx])
            except Exception as exc:  # noqa: BLE001 - recorded, not fatal
                messages.append(f"lambda={grid[idx]:g} skipped: {exc}")

    ic_values = np.full(grid.size, np.nan)
    k_values = np.full(grid.size, np.nan)
    for idx, fit in enumerate(fits):
        if fit is None:
            continue
        ic_values[idx] = information_criterion(fit, rho, p, m)
        k_values[idx] = fit.partition.n_groups
    if not np.any(np.isfinite(k_values)):
        raise RuntimeError(
            "every grid point failed: " + "; ".join(messages[:3])
        )

    # minimal criterion, ties toward the smaller penalty; nan entries never win
    scored = np.where(np.isnan(ic_values), np.inf, ic_values)
    best_idx = int(np.lexsort((grid, scored))[0])
    return SelectionResult(
        grid=grid,
        ic_values=ic_values,
        k_values=k_values,
        best_lambda=float(grid[best_idx]),
        best_fit=fits[best_idx],
        rho=float(rho),
        design=design,
        messages=tuple(messages),
        fits=tuple(fits) if keep_fits else None,
    )
