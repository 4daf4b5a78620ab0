"""Network-response regression with structured multiplicative shrinkage."""

__version__ = "0.1.0"

from .em import FitError, FitOptions, FitResult, fit
from .model import (
    Dataset,
    Hyperparams,
    ModelParams,
    PriorNetwork,
    assemble_u,
    coefficient_slice,
    neg_log_posterior,
    predict,
)

__all__ = [
    "Dataset", "FitError", "FitOptions", "FitResult", "Hyperparams", "ModelParams",
    "PriorNetwork", "assemble_u", "coefficient_slice", "fit", "neg_log_posterior", "predict",
]
