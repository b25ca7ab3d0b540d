"""Typed exceptions raised across the workbench."""


class WorkbenchError(Exception):
    """Base class for all workbench errors."""


class ShapeError(WorkbenchError, ValueError):
    """Tensor or image shapes are incompatible."""


class NonFiniteError(WorkbenchError, ArithmeticError):
    """A forward pass or loss produced NaN or infinity."""

    def __init__(self, where: str, message: str = "") -> None:
        self.where = where
        super().__init__(message or f"Non-finite values produced by '{where}'")


class TapeError(WorkbenchError, RuntimeError):
    """Backward was requested without a train-mode tape."""


class LossDomainError(WorkbenchError, ValueError):
    """Loss input lies outside the loss function's domain."""


class ResampleError(WorkbenchError, ValueError):
    """Invalid resampling request (empty image, bad size, divisibility)."""


class ImageDecodeError(WorkbenchError, OSError):
    """An image file could not be read or decoded."""


class UnsupportedImageError(WorkbenchError, ValueError):
    """Image has an unsupported bit depth or channel layout."""


class AnnotationError(WorkbenchError, ValueError):
    """VOC annotation is malformed or describes an invalid box."""


class DetectionFormatError(WorkbenchError, ValueError):
    """A detections CSV row could not be parsed."""

    def __init__(self, row: int, message: str) -> None:
        self.row = row
        super().__init__(f"row {row}: {message}")


class DatasetError(WorkbenchError, ValueError):
    """Dataset construction failed (empty split, single class, ...)."""


class CheckpointError(WorkbenchError):
    """Checkpoint file could not be written or read."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint has wrong magic bytes, is truncated, or fails its checksum."""


class TrainingDivergedError(WorkbenchError, ArithmeticError):
    """A training loss became non-finite."""

    def __init__(self, iteration: int, last_checkpoint=None) -> None:
        self.iteration = iteration
        self.last_checkpoint = last_checkpoint
        super().__init__(f"Non-finite loss at iteration {iteration}")


class ConfigError(WorkbenchError, ValueError):
    """Experiment configuration is invalid."""


class StagePrerequisiteError(WorkbenchError):
    """A stage was run before the stage producing its inputs."""

    def __init__(self, stage: str, missing: str) -> None:
        self.stage = stage
        self.missing = missing
        super().__init__(f"Missing prerequisite {missing!r}; run stage '{stage}' first")


class NoGroundTruthError(WorkbenchError, ValueError):
    """Average precision was requested for a class without ground-truth boxes."""
