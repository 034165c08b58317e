"""Exception types shared across the platform.

The CLI maps ValidationError/ConfigError/ArgumentError/ShapeError/FormatError
to exit code 2 and NumericError to exit code 3.
"""


class AdvsearchError(Exception):
    """Base class for all platform errors."""


class ArgumentError(AdvsearchError, ValueError):
    """A caller-supplied value violates a documented precondition."""


class ShapeError(AdvsearchError, ValueError):
    """Tensor shapes are incompatible for the named primitive."""


class StateError(AdvsearchError, RuntimeError):
    """An operation was invoked in an invalid order (e.g. backward before forward)."""


class ConfigError(AdvsearchError, ValueError):
    """A configuration value is outside the supported enumeration."""


class FormatError(AdvsearchError, ValueError):
    """An external file does not match its declared binary/text format."""


class ValidationError(AdvsearchError, ValueError):
    """An experiment config failed validation; carries every bad field."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class NumericError(AdvsearchError, ArithmeticError):
    """Training or evaluation produced non-finite values."""

    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
