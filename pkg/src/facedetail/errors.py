"""Exception hierarchy shared across the package."""


class FaceDetailError(Exception):
    """Base class for all package errors."""


class InvalidInputError(FaceDetailError):
    """Raised when an argument violates a documented precondition."""


class InvalidEditError(InvalidInputError):
    """Raised for malformed edit documents (bad mode, out-of-bounds points, ...)."""


class TopologyError(FaceDetailError):
    """Raised for broken mesh connectivity (unreferenced vertices, bad indices)."""


class DegenerateCorpusError(FaceDetailError):
    """Raised when a corpus cannot support the requested operation."""


class TrainingError(FaceDetailError):
    """Raised when model fitting cannot proceed (too few samples, bad config)."""


class ModelFormatError(FaceDetailError):
    """Raised for unreadable model files: bad magic, version, or checksum."""


class DimensionMismatchError(ModelFormatError):
    """Raised when a loaded model's shape disagrees with what the caller expects."""
