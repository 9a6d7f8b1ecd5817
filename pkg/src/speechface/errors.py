"""Exception hierarchy shared by all speechface modules."""


class SpeechFaceError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SpeechFaceError):
    """Tensor or layer dimensions do not match what the operation requires."""


class ParseError(SpeechFaceError):
    """A file (WAV, checkpoint, rig, dataset, CSV) is malformed.

    Messages include the byte offset or line number where parsing failed.
    """


class RangeError(SpeechFaceError):
    """An index or window reaches outside the available data."""


class ConfigError(SpeechFaceError):
    """An operation was invoked with an invalid or incomplete configuration."""


class StateError(SpeechFaceError):
    """An operation was invoked in the wrong order (e.g. backward before forward)."""


class DataError(SpeechFaceError):
    """Input data violates a contract (length mismatch, out-of-range values)."""


class NumericError(SpeechFaceError):
    """Non-finite values were produced where finite values are required."""
