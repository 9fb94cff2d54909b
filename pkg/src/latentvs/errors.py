"""Exception hierarchy shared across the package.

Each failure class maps to a distinct CLI exit code (see cli.EXIT_CODES).
"""


class LatentVSError(Exception):
    """Base class for all package errors."""


class ConfigError(LatentVSError):
    """Bad configuration file or option value."""


class DatasetFormatError(LatentVSError):
    """Base class for dataset container problems."""


class DatasetVersionError(DatasetFormatError):
    """Container version is unknown or unsupported."""


class DatasetTruncatedError(DatasetFormatError):
    """File is shorter than its header claims."""


class DatasetChecksumError(DatasetFormatError):
    """Payload bytes do not match the stored checksum."""


class DegenerateDatasetError(LatentVSError):
    """Dataset cannot be return-normalized (all raw returns equal)."""


class CheckpointError(LatentVSError):
    """Checkpoint file is unreadable or incompatible with the config."""


class MissingArtifactError(LatentVSError):
    """A required artifact (dataset, checkpoint, ...) does not exist."""


class TrainingDivergedError(LatentVSError):
    """Non-finite loss encountered during training."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class SamplerDivergedError(LatentVSError):
    """Non-finite values produced during reverse diffusion."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class StageFailedError(LatentVSError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
