"""Semivarying coefficient models for longitudinal data.

Estimation of y = x'beta + z'g(t) + error on clustered observations:
spline-basis GEE for the constant part, kernel smoothing for the varying
part, residual-based covariance estimation, and a refit of beta weighted
by the estimated covariance. See README.md for the workflow.
"""

__version__ = "0.1.0"

from .config import PipelineConfig
from .covariance import CovarianceModel, build_covariance_model, sigma_matrix
from .data import (
    LongitudinalDataset,
    Subject,
    load_csv,
    make_dataset,
    validate,
    write_csv,
)
from .errors import (
    ConfigError,
    DataError,
    NumericalError,
    PipelineError,
    RankDeficiencyError,
    SingularSmootherError,
    SvcmError,
)
from .estimator import SemivaryingGEE
from .gee import WeightSpec, beta_se, gee_spline_fit
from .harness import McSummary, mc_study, report
from .pipeline import EfficientFitResult, efficient_fit, pointwise_ci_g
from .simulate import SimConfig, simulate_dataset
from .smoothing import (
    CurveEstimate,
    local_linear_cov2d,
    local_linear_variance,
    local_linear_vc,
    loso_cv,
)
from .splines import SplineBasis, build_basis

__all__ = [
    "__version__",
    "PipelineConfig",
    "CovarianceModel",
    "build_covariance_model",
    "sigma_matrix",
    "LongitudinalDataset",
    "Subject",
    "load_csv",
    "make_dataset",
    "validate",
    "write_csv",
    "ConfigError",
    "DataError",
    "NumericalError",
    "PipelineError",
    "RankDeficiencyError",
    "SingularSmootherError",
    "SvcmError",
    "SemivaryingGEE",
    "WeightSpec",
    "beta_se",
    "gee_spline_fit",
    "McSummary",
    "mc_study",
    "report",
    "EfficientFitResult",
    "efficient_fit",
    "pointwise_ci_g",
    "SimConfig",
    "simulate_dataset",
    "CurveEstimate",
    "local_linear_cov2d",
    "local_linear_variance",
    "local_linear_vc",
    "loso_cv",
    "SplineBasis",
    "build_basis",
]
