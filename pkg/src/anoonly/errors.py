"""Exception hierarchy shared by every anoonly module."""


class AnoOnlyError(Exception):
    """Base class for all library errors."""


class ShapeError(AnoOnlyError, ValueError):
    pass


class BatchTooSmallError(AnoOnlyError, ValueError):
    pass


class StateError(AnoOnlyError, RuntimeError):
    """Raised when a backward pass has no matching cached forward."""


class ConfigError(AnoOnlyError, ValueError):
    pass


class NumericError(AnoOnlyError, ArithmeticError):
    pass


class UndefinedMetricError(AnoOnlyError, ValueError):
    """A ranking metric was asked for on a set missing a required class."""
