"""Exception hierarchy shared across the package."""


class ContrastVAEError(Exception):
    """Base class for all package errors."""


class ShapeError(ContrastVAEError, ValueError):
    """Operand shapes do not conform."""


class DomainError(ContrastVAEError, ValueError):
    """Input outside an op's mathematical domain (e.g. log of a non-positive)."""


class NumericError(ContrastVAEError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class UsageError(ContrastVAEError, TypeError):
    """An API was called in a way it does not support."""


class DataError(ContrastVAEError):
    """Interaction data is unusable (empty after filtering, malformed, ...)."""


class FormatError(DataError):
    """Too many malformed lines in an input file."""


class CheckpointError(ContrastVAEError):
    """A checkpoint is corrupt or incompatible with the requested model."""


class ConfigError(ContrastVAEError, ValueError):
    """Unknown or invalid configuration keys/values."""
