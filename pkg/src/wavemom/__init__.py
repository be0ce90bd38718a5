"""Wavelet-moment estimation of layered stochastic error models."""

from .errors import DataError, NumericalError, SpecValidationError, WavemomError
from .estimator import (
    DepTestResult,
    FitResult,
    Objective,
    dependence_test,
    fit,
    fit_from_moments,
    univariate_fit,
)
from .models import (
    LatentBlock,
    ModelSpec,
    ParamVector,
    block_diff_crosscov,
    classify,
    ensure_valid,
    jacobian,
    layout,
    n_params,
    restrict_to_channel,
    theoretical_moment,
    theoretical_vector,
    validate,
)
from .moments import (
    MomentCovariance,
    MomentIndex,
    MomentVector,
    canonical_indices,
    confidence_intervals,
    moment_covariance,
    moment_vector,
)
from .simulate import SimConfig, simulate, simulate_batch
from .wavelet import CoefficientSeries, HaarLevel, build_filter, decompose, max_level

__all__ = [
    "WavemomError",
    "SpecValidationError",
    "NumericalError",
    "DataError",
    "HaarLevel",
    "CoefficientSeries",
    "build_filter",
    "decompose",
    "max_level",
    "MomentIndex",
    "MomentVector",
    "MomentCovariance",
    "canonical_indices",
    "moment_vector",
    "moment_covariance",
    "confidence_intervals",
    "LatentBlock",
    "ModelSpec",
    "ParamVector",
    "classify",
    "validate",
    "ensure_valid",
    "layout",
    "n_params",
    "block_diff_crosscov",
    "theoretical_moment",
    "theoretical_vector",
    "jacobian",
    "restrict_to_channel",
    "SimConfig",
    "simulate",
    "simulate_batch",
    "Objective",
    "FitResult",
    "DepTestResult",
    "univariate_fit",
    "fit",
    "fit_from_moments",
    "dependence_test",
]

__version__ = "0.1.0"
