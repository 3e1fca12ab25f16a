"""Exception hierarchy shared by all igcam modules."""


class IgcamError(Exception):
    """Base class for library errors."""


class ConfigurationError(IgcamError, ValueError):
    """Inconsistent model spec, parameter layout or run configuration."""


class PreconditionError(IgcamError, ValueError):
    """An operation was called with inputs outside its contract."""


class SizeError(IgcamError, ValueError):
    """A dense computation was requested above its configured size cap."""


class NumericError(IgcamError, ArithmeticError):
    """A non-finite value appeared during a computation."""

    def __init__(self, message, iteration=None, component=None):
        super().__init__(message)
        self.iteration = iteration
        self.component = component


class DivergenceError(NumericError):
    """An iterative estimator left its stability region."""
