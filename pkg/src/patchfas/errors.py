"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PatchFASError(Exception):
    exit_code = 1


class ValidationError(PatchFASError, ValueError):
    """An input violates a documented invariant or precondition."""
    exit_code = 4


class RegistryError(ValidationError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ManifestError(ValidationError):
    pass


class GeometryError(ValidationError):
    pass


class ShapeError(ValidationError):
    exit_code = 8


class CheckpointError(PatchFASError):
    exit_code = 5


class CheckpointVersionError(CheckpointError):
    exit_code = 5


class CheckpointChecksumError(CheckpointError):
    exit_code = 6


class CheckpointTruncatedError(CheckpointError):
    exit_code = 7


class CheckpointShapeError(CheckpointError, ShapeError):
    exit_code = 8


class MissingFileError(PatchFASError, FileNotFoundError):
    exit_code = 3
