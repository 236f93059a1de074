"""Latent-group panel estimation with smoothly time-varying coefficients.

The pipeline: expand each unit's covariates over a B-spline basis of t/T,
demean within units, fuse the per-unit control points through a pairwise
adaptive penalty solved by ADMM, threshold the fused estimate into groups,
refit each group by pooled least squares, and pick the penalty level with
a BIC-type criterion. Standard errors for the refitted coefficient curves
come from a HAC sandwich. A seeded simulation harness reproduces the
benchmark study designs.
"""

from .splines import SplineConfig, build_knots, basis_matrix, eval_basis, eval_curve
from .panel import (
    Panel,
    PanelFormatError,
    SieveDesign,
    build_design,
    load_csv,
    panel_from_arrays,
)
from .solver import (
    AdmmState,
    FitConfig,
    PairWeights,
    PenaltyRule,
    RankDeficientUnitError,
    SingularGroupError,
    adaptive_weights,
    admm_fit,
    objective_value,
    preliminary_ols,
    soft_threshold,
)
from .grouping import (
    GroupedFit,
    Partition,
    coef_path,
    enforce_min_share,
    extract_partition,
    grouped_fit,
    post_lasso,
)
from .selection import (
    SelectionResult,
    default_interior_knots,
    default_rho,
    information_criterion,
    lambda_grid,
    select_lambda,
)
from .inference import (
    CoefCovariance,
    HacConfig,
    coef_covariance,
    coef_stderr,
    default_window,
    hac_meat,
)
from .simulation import (
    DgpSpec,
    StudyReport,
    TruePanel,
    ari,
    default_study_grid,
    gen_panel,
    group_paths,
    logistic_F,
    oracle_fit,
    rmse_paths,
    run_study,
    study_penalty_rule,
    true_paths,
)

__version__ = "0.1.0"

__all__ = [
    "SplineConfig",
    "build_knots",
    "basis_matrix",
    "eval_basis",
    "eval_curve",
    "Panel",
    "PanelFormatError",
    "SieveDesign",
    "build_design",
    "load_csv",
    "panel_from_arrays",
    "AdmmState",
    "FitConfig",
    "PairWeights",
    "PenaltyRule",
    "RankDeficientUnitError",
    "SingularGroupError",
    "adaptive_weights",
    "admm_fit",
    "objective_value",
    "preliminary_ols",
    "soft_threshold",
    "GroupedFit",
    "Partition",
    "coef_path",
    "enforce_min_share",
    "extract_partition",
    "grouped_fit",
    "post_lasso",
    "SelectionResult",
    "default_interior_knots",
    "default_rho",
    "information_criterion",
    "lambda_grid",
    "select_lambda",
    "CoefCovariance",
    "HacConfig",
    "coef_covariance",
    "coef_stderr",
    "default_window",
    "hac_meat",
    "DgpSpec",
    "StudyReport",
    "TruePanel",
    "ari",
    "default_study_grid",
    "gen_panel",
    "group_paths",
    "logistic_F",
    "oracle_fit",
    "rmse_paths",
    "run_study",
    "study_penalty_rule",
    "true_paths",
    "__version__",
]
