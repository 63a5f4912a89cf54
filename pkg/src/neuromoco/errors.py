"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class NeuroMoCoError(Exception):
    exit_code = 1


class ValidationError(NeuroMoCoError, ValueError):
    """Input violates a documented invariant (bounds, label range, ...)."""


class ConfigError(ValidationError):
    """Inconsistent or unknown configuration."""


class ShapeError(NeuroMoCoError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class UsageError(NeuroMoCoError, RuntimeError):
    """API called in a state it does not support (e.g. non-scalar backward)."""


class IntegrityError(NeuroMoCoError, RuntimeError):
    """Two structures that must mirror each other no longer do."""


class FormatError(NeuroMoCoError):
    """On-disk bytes do not follow the expected layout."""

    exit_code = 2


class CorruptionError(FormatError):
    """File layout is recognised but the payload is truncated or damaged."""


class NumericalError(NeuroMoCoError, ArithmeticError):
    """Non-finite values or a failed numerical check."""

    exit_code = 3
