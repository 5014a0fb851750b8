"""Exception hierarchy.

Two families matter to callers: ValidationError for bad inputs or
configuration (CLI exit code 2) and NumericalError for runs that start from
valid inputs but break down numerically (CLI exit code 3). Everything else is
a plain bug and is allowed to surface as the underlying exception.
"""


class DualityLabError(Exception):
    """Base class for all package errors."""


class ValidationError(DualityLabError):
    """Invalid input data, dimensions, or configuration."""


class DimensionError(ValidationError):
    """Array shapes do not match the declared dimensions."""


class GridMismatchError(ValidationError):
    """Two objects that must share a time grid do not."""


class ConfigError(ValidationError):
    """Scenario configuration file is malformed or incomplete."""


class NegativeRateError(ValidationError):
    """An off-diagonal transition-rate entry is negative."""


class RowSumError(ValidationError):
    """A transition-rate matrix row does not sum to zero."""


class PriorSimplexError(ValidationError):
    """A prior vector is not a probability vector."""


class NoiseNotSpdError(ValidationError):
    """An observation-noise covariance is not symmetric positive definite."""


class NumericalError(DualityLabError):
    """A computation on valid inputs lost numerical meaning."""


class IntegrationDivergedError(NumericalError):
    """An integrator produced a non-finite state."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"integration diverged at step {step}")


class NotPositiveDefiniteError(NumericalError):
    """A matrix required to be SPD failed its Cholesky factorization."""

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(
            message or f"matrix is not positive definite (pivot {pivot})"
        )


class SingularPriorError(NumericalError):
    """A cost that needs the inverse prior covariance got a singular one."""


class SingularCovarianceError(NumericalError):
    """A filter covariance became too ill-conditioned to invert."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(
            message
            or f"covariance is singular or ill-conditioned at step {step}"
        )


class FilterDegenerateError(NumericalError):
    """The unnormalized filter mass underflowed to zero."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(
            message or f"filter mass underflowed at step {step}"
        )
