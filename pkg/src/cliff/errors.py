"""Exception hierarchy shared across the package."""


class CliffError(Exception):
    """Base class for all package errors."""


class DimensionError(CliffError, ValueError):
    pass


class ParameterError(CliffError, ValueError):
    pass


class DataError(CliffError, ValueError):
    pass


class StateError(CliffError, RuntimeError):
    pass


class RegistrationError(CliffError, ValueError):
    pass


class ConfigurationError(CliffError, ValueError):
    pass


class CompatibilityError(CliffError, ValueError):
    pass


class CheckpointError(CliffError, IOError):
    """Raised when a checkpoint file cannot be decoded."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass
