"""Bayesian flux inversion with bias correction and correlated observation errors."""

__version__ = "0.1.0"

from .errors import ConfigMismatchError, NotPositiveDefiniteError, SliceSamplingError
from .kernels import BACKEND
from .model import (
    AlphaPrior,
    BasisLibrary,
    ErrorParams,
    ErrorPrior,
    ModelState,
    ObservationGroup,
    Priors,
    RegionPrior,
)
from .sampler import ChainOutput, SamplerConfig, run_chain

__all__ = [
    "AlphaPrior",
    "BACKEND",
    "BasisLibrary",
    "ChainOutput",
    "ConfigMismatchError",
    "ErrorParams",
    "ErrorPrior",
    "ModelState",
    "NotPositiveDefiniteError",
    "ObservationGroup",
    "Priors",
    "RegionPrior",
    "SamplerConfig",
    "SliceSamplingError",
    "__version__",
]
