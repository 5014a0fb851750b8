"""Estimation-control duality laboratory.

Linear-Gaussian and finite-state filtering models, their dual optimal
control problems, and Monte Carlo machinery for checking that the two
sides of each duality agree numerically.
"""

from duality_lab.errors import (
    ConfigError,
    DimensionError,
    DualityLabError,
    FilterDegenerateError,
    GridMismatchError,
    IntegrationDivergedError,
    NegativeRateError,
    NoiseNotSpdError,
    NotPositiveDefiniteError,
    NumericalError,
    PriorSimplexError,
    RowSumError,
    SingularCovarianceError,
    SingularPriorError,
    ValidationError,
)
from duality_lab.numkit import ObservationPath, SeededRng, TimeGrid

__all__ = [
    "ConfigError",
    "DimensionError",
    "DualityLabError",
    "FilterDegenerateError",
    "GridMismatchError",
    "IntegrationDivergedError",
    "NegativeRateError",
    "NoiseNotSpdError",
    "NotPositiveDefiniteError",
    "NumericalError",
    "ObservationPath",
    "PriorSimplexError",
    "RowSumError",
    "SeededRng",
    "SingularCovarianceError",
    "SingularPriorError",
    "TimeGrid",
    "ValidationError",
]

__version__ = "0.1.0"
