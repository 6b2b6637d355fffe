"""Exception types shared across the package."""


class PertError(Exception):
    """Base class for all package errors."""


class ConfigError(PertError, ValueError):
    """An invalid or incompatible configuration."""


class DimensionError(PertError, ValueError):
    """Tensor shapes that violate an operation's contract."""


class InputValidationError(PertError, ValueError):
    """Input values outside the allowed domain (e.g. NaN, out of [0, 1])."""
