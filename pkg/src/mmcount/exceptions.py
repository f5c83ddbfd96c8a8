"""Exception hierarchy.

Everything raised on bad input derives from :class:`ValidationError` (itself a
``ValueError``) so callers and the CLI can map it to exit status 1. Failed
numerical self-checks raise :class:`NumericalCheckError` (exit status 2).
"""


class ValidationError(ValueError):
    """Input failed a structural or domain check."""


class DimensionError(ValidationError):
    """Shapes of the inputs are inconsistent."""


class GeneratorError(ValidationError):
    """Base class for an invalid chain generator."""


class NegativeRateError(GeneratorError):
    """An off-diagonal generator entry is negative."""


class ColumnSumError(GeneratorError):
    """A generator column does not sum to zero."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class ReducibleChainError(GeneratorError):
    """The chain has more than one communicating class."""


class PreconditionError(ValidationError):
    """A documented precondition of an operation does not hold."""


class CapacityError(ValidationError):
    """The request exceeds a supported size (obligor count, truncation level)."""


class DegenerateObservationError(ValidationError):
    """A jump was observed although the filtered intensity is zero."""


class StepSizeError(ArithmeticError):
    """The filter integrator could not keep the posterior nonnegative."""


class NumericalCheckError(ArithmeticError):
    """A numerical identity or self-check failed its tolerance."""


class InternalError(RuntimeError):
    """A state that valid input cannot reach."""


class ConfigError(ValidationError):
    """A run configuration violates the schema; ``path`` names the field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
