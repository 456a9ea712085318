"""Exception types shared across the package."""


class SamedOctError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SamedOctError):
    """Invalid model/training configuration or incompatible shapes."""


class ValidationError(SamedOctError):
    """Runtime input violates a documented precondition."""


class FormatError(SamedOctError):
    """On-disk or wire payload is malformed; message names the offending field."""


class EmptyClassError(SamedOctError):
    """Requested class has no pixels in the given slice; callers typically skip."""


class TrainingDivergedError(SamedOctError):
    """Loss became non-finite during optimization."""
