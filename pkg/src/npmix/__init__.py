"""Mixtures of Dirichlet process mixtures with repulsive region priors.

The package fits finite mixtures whose components are themselves Dirichlet
process mixtures of Gaussians, using a slice sampler, and ships an
independent Hermite-expansion estimator for splitting two-component
location mixtures.
"""

from npmix.errors import (
    ConditioningError,
    DegenerateEstimateError,
    InvalidArgumentError,
    NumericalMassError,
    SliceDegenerateError,
)
from npmix.rngdist import RngStream

__version__ = "0.1.0"

__all__ = [
    "ConditioningError",
    "DegenerateEstimateError",
    "InvalidArgumentError",
    "NumericalMassError",
    "RngStream",
    "SliceDegenerateError",
]
