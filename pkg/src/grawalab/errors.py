"""Exception types shared across the package."""


class GrawaError(Exception):
    """Base class for all errors raised by grawalab."""


class ConfigError(GrawaError, ValueError):
    """Invalid configuration value or argument.

    ``key`` names the offending configuration key when one is known.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class SignatureError(GrawaError, ValueError):
    """Layer count or layer shapes do not line up."""


class DomainError(GrawaError, ValueError):
    """Objective evaluated outside of its domain."""


class NumericError(GrawaError, ArithmeticError):
    """Non-finite loss or gradient encountered."""
