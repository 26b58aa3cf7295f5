"""Exception hierarchy shared across the package."""


class CanonPoseError(Exception):
    """Base class for all package errors."""


class ConfigError(CanonPoseError, ValueError):
    pass


class ShapeError(CanonPoseError, ValueError):
    """Tensor dimensions do not match what a component expects."""


class DegenerateMeshError(CanonPoseError, ValueError):
    pass


class OutOfFrustumError(CanonPoseError, ValueError):
    pass


class EmptyTrainError(CanonPoseError, ValueError):
    pass


class ValidationError(CanonPoseError, ValueError):
    pass


class FormatError(CanonPoseError, IOError):
    """Bad magic bytes or an unreadable header."""


class TruncatedFileError(FormatError):
    pass


class VersionMismatchError(CanonPoseError, IOError):
    pass


class DimensionMismatchError(CanonPoseError, IOError):
    pass


class FingerprintMismatchError(CanonPoseError, ValueError):
    pass


class DivergenceError(CanonPoseError, RuntimeError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
