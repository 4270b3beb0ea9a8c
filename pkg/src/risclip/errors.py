class RisclipError(Exception):
    """Base class for all package errors."""


class ValidationError(RisclipError, ValueError):
    """Bad input: wrong shapes, malformed files, violated preconditions."""


class ConfigError(ValidationError):
    pass


class ManifestError(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass


class NumericalError(RisclipError, FloatingPointError):
    """A non-finite activation or loss was produced."""
