"""Exception hierarchy shared across the package."""


class DCAEError(Exception):
    """Base class for all package errors."""


class ShapeError(DCAEError, ValueError):
    pass


class ConfigError(DCAEError, ValueError):
    pass


class PipelineError(DCAEError, RuntimeError):
    """Raised when training phases are run out of order or misconfigured."""


class NumericError(DCAEError, FloatingPointError):
    """A loss or activation became non-finite."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class DataError(DCAEError, IOError):
    pass


class CheckpointError(DCAEError, IOError):
    pass


class VersionError(CheckpointError):
    pass


class CorruptIndexError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass
