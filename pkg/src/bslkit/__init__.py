"""Bayesian synthetic likelihood: samplers, covariance shrinkage and posterior adjustment."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    BSLError,
    DegenerateSummaryError,
    RngStream,
    SimulatorModel,
    SingularCovarianceError,
    SupportError,
    spawn_stream,
    sym_inv_sqrt,
    sym_sqrt,
)
from .synlik import CovarianceSpec, estimated_log_synlik, log_synlik  # noqa: E402

__all__ = [
    "BSLError",
    "CovarianceSpec",
    "DegenerateSummaryError",
    "RngStream",
    "SimulatorModel",
    "SingularCovarianceError",
    "SupportError",
    "estimated_log_synlik",
    "log_synlik",
    "spawn_stream",
    "sym_inv_sqrt",
    "sym_sqrt",
    "__version__",
]
