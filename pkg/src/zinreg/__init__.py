"""Semiparametric zero-inflated normal regression.

Penalized cubic-spline estimation with ridge shrinkage, optional proportional
constraints between the binary and mean parts, Fisher-information inference,
and Monte Carlo cross-validation model selection.
"""

from .errors import ZinError
from .fitting import (
    FittedZinModel,
    GcvOptions,
    SmoothTerm,
    confidence_band,
    fit_constrained,
    fit_unconstrained,
    inference_report,
    observed_information,
    select_smoothing,
    smooth_significance,
)
from .model import (
    ConstraintSpec,
    Dataset,
    Factor,
    ModelSpec,
    PartSpec,
    SmoothSpec,
    ZinParams,
    build_frame,
    linear_predictors,
    log_likelihood,
    penalized_log_likelihood,
    predict,
)
from .selection import CvReport, MccvConfig, auc, cv_loglik, mccv, mse_corrected, mse_nonzero
from .simulate import SimConfig, SuccessRateTable, run_success_rate_study, simulate_dataset
from .splines import (
    KnotSet,
    PenaltyMatrix,
    SplineBasis,
    centering_constant,
    eval_basis,
    penalty_matrix,
    place_knots,
    shrink_penalty,
)

__version__ = "0.1.0"

__all__ = [
    "CvReport", "ConstraintSpec", "Dataset", "Factor", "FittedZinModel", "GcvOptions",
    "KnotSet", "MccvConfig", "ModelSpec", "PartSpec", "PenaltyMatrix", "SimConfig",
    "SmoothSpec", "SmoothTerm", "SplineBasis", "SuccessRateTable", "ZinError",
    "ZinParams", "auc", "build_frame", "centering_constant", "confidence_band",
    "cv_loglik", "eval_basis", "fit_constrained", "fit_unconstrained",
    "inference_report", "linear_predictors", "log_likelihood", "mccv",
    "mse_corrected", "mse_nonzero", "observed_information",
    "penalized_log_likelihood", "penalty_matrix", "place_knots", "predict",
    "run_success_rate_study", "select_smoothing", "shrink_penalty",
    "simulate_dataset", "smooth_significance",
]
