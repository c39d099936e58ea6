"""Exception types shared across the package."""


class NAIError(Exception):
    """Base class for package errors."""


class InputError(NAIError, ValueError):
    """Malformed or out-of-range input data."""


class ConfigError(NAIError, ValueError):
    """Inconsistent configuration (bank/backend mismatch, bad bounds)."""


class NumericError(NAIError, ArithmeticError):
    """A computation produced NaN or Inf."""
