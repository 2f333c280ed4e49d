"""Exception hierarchy shared by every segtrus module."""


class SegtrusError(Exception):
    """Base class for all errors raised by segtrus."""


class ShapeError(SegtrusError, ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ConfigError(SegtrusError, ValueError):
    """A network or training configuration violates its invariants."""


class DataError(SegtrusError, ValueError):
    """Input data has invalid content (non-binary masks, unnormalized probabilities)."""


class CorruptionError(SegtrusError, ValueError):
    """An index map points outside the pooling window it belongs to."""


class NumericError(SegtrusError, ArithmeticError):
    """A non-finite value appeared during computation."""


class UsageError(SegtrusError, RuntimeError):
    """An API was called out of order or with unusable arguments."""


class FormatError(SegtrusError, ValueError):
    """A file does not follow the expected on-disk format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(FormatError):
    """A checkpoint file could not be loaded."""


class ChecksumError(CheckpointError):
    """Checkpoint payload does not match its stored CRC32."""


class VersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version."""
