"""Sparse Bayesian regression with evidence maximization and hard thresholding.

The linear model y = X beta + noise is fit by maximizing the marginal
likelihood over per-coordinate prior variances, which drives irrelevant
coordinates to exactly zero; a data-driven hard threshold then removes the
remaining small spurious variances.  A coordinate-descent lasso with k-fold
cross-validation is included as a baseline, along with a deterministic
synthetic-data harness for comparing the methods.
"""

from .em import EmConfig, SblFit, em_fit, em_step, orthogonal_closed_form, stationarity_diagnostic
from .exceptions import (
    ConditioningError,
    ConvergenceError,
    InvalidInputError,
    NonOrthogonalError,
    SblError,
)
from .lasso import LassoConfig, LassoFit, cd_fit_path, cv_select, soft_threshold
from .model import (
    Dataset,
    GroundTruth,
    HyperParams,
    PosteriorMoments,
    beta_from_gamma,
    log_marginal_likelihood,
    posterior_moments,
)
from .simulate import (
    METHODS,
    ErrorBoundResult,
    MetricsRecord,
    NullRetentionResult,
    ScenarioConfig,
    ScenarioResult,
    compute_metrics,
    generate_design,
    generate_truth_and_response,
    run_grid,
    run_scenario,
    verify_error_bound_and_signs,
    verify_null_retention,
    write_grid_csv,
    write_metrics_csv,
    write_summary_json,
)
from .threshold import (
    ThresholdConfig,
    ThresholdedFit,
    estimate_rho_hat,
    hard_threshold,
    select_threshold,
)

__version__ = "0.1.0"

__all__ = [
    "ConditioningError",
    "ConvergenceError",
    "Dataset",
    "EmConfig",
    "ErrorBoundResult",
    "GroundTruth",
    "HyperParams",
    "InvalidInputError",
    "LassoConfig",
    "LassoFit",
    "METHODS",
    "MetricsRecord",
    "NonOrthogonalError",
    "NullRetentionResult",
    "PosteriorMoments",
    "SblError",
    "SblFit",
    "ScenarioConfig",
    "ScenarioResult",
    "ThresholdConfig",
    "ThresholdedFit",
    "beta_from_gamma",
    "cd_fit_path",
    "compute_metrics",
    "cv_select",
    "em_fit",
    "em_step",
    "estimate_rho_hat",
    "generate_design",
    "generate_truth_and_response",
    "hard_threshold",
    "log_marginal_likelihood",
    "orthogonal_closed_form",
    "posterior_moments",
    "run_grid",
    "run_scenario",
    "select_threshold",
    "soft_threshold",
    "stationarity_diagnostic",
    "verify_error_bound_and_signs",
    "verify_null_retention",
    "write_grid_csv",
    "write_metrics_csv",
    "write_summary_json",
]
