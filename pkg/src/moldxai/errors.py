"""Exception hierarchy. The CLI maps each family to a stable exit code."""


class MoldXAIError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class ConfigError(MoldXAIError, ValueError):
    """Invalid configuration, shapes, or arguments."""

    exit_code = 1


class DataError(MoldXAIError):
    """Missing, corrupt, or schema-inconsistent data files."""

    exit_code = 2


class ModelFormatError(DataError):
    """Model file cannot be decoded (truncated, wrong version, ...)."""


class NumericalError(MoldXAIError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class StaleCacheError(MoldXAIError, RuntimeError):
    """A forward cache was used with parameters mutated after the forward pass."""
