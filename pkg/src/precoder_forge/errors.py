"""Exception types shared across the package."""


class PrecoderError(Exception):
    """Base class for all package errors."""


class DimensionError(PrecoderError, ValueError):
    """Array shapes or lengths are inconsistent."""


class ParameterError(PrecoderError, ValueError):
    """A scalar parameter is outside its valid range."""


class SingularMatrixError(PrecoderError, ValueError):
    """A matrix that must be invertible is rank deficient."""


class FormatError(PrecoderError, ValueError):
    """A binary file is malformed or truncated."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(FormatError):
    """A binary file declares a version newer than this build can read."""


class ConfigError(PrecoderError, ValueError):
    """Model, dataset or training configuration mismatch."""


class NonFiniteError(PrecoderError, FloatingPointError):
    """A loss or input became NaN or infinite."""
