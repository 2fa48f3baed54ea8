"""Exception types raised by the calibration library.

Every error derives from :class:`CalibrationError` and from the builtin
exception the command line already reports (``ValueError``,
``ArithmeticError`` or ``RuntimeError``).
"""


class CalibrationError(Exception):
    """Base class for all calibration errors."""


class InvalidInputError(CalibrationError, ValueError):
    """An argument violates the precondition of an operation."""


class NumericalDomainError(CalibrationError, ArithmeticError):
    """A numerical evaluation left its valid domain.

    Raised for a negative radicand in the choke equation, a singular
    observation covariance, or NaN log-weights.
    """


class DegenerateFilterError(CalibrationError, RuntimeError):
    """All particle weights vanished."""


class DatasetParseError(CalibrationError, ValueError):
    """A dataset file does not match its schema."""


class ConsistencyError(CalibrationError, ValueError):
    """An observation disagrees with the active flags of its time step."""


class ConfigError(CalibrationError, ValueError):
    """A run configuration or scenario definition is invalid."""
