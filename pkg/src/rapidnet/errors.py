"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Tensor shapes are illegal or incompatible (mismatched operands, wrong channel count)."""


class GeometryError(ValueError):
    """Convolution or resolution geometry admits no valid output (e.g. output dim < 1)."""


class ConfigError(ValueError):
    """Model configuration is invalid (unknown variant, bad dilation/kernel combination)."""


class FusionError(ValueError):
    """Layer is not eligible for the requested structural fusion."""


class StateError(RuntimeError):
    """Operation called in the wrong train/eval state, or required state is missing."""


class LabelError(ValueError):
    """Class label outside the valid range."""


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite."""


class CheckpointError(Exception):
    """Base class for checkpoint read/write failures."""


class FormatError(CheckpointError):
    """File does not start with the expected magic bytes."""


class VersionError(CheckpointError):
    """Checkpoint version is not supported."""


class CorruptFileError(CheckpointError):
    """Checkpoint is truncated or otherwise unreadable."""


class IntegrityError(CheckpointError):
    """Checkpoint contents disagree with the embedded model configuration."""
