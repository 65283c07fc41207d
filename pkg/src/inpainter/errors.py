"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array argument has the wrong shape."""


class ParameterError(ValueError):
    """A scalar argument is out of its valid range."""


class VocabularyError(ValueError):
    """A prompt token is not in the closed vocabulary."""


class MaskFilterError(ValueError):
    """A segmentation mask failed the size filter."""


class ProtocolError(ValueError):
    """An evaluation input violates the metric's protocol."""


class CompatibilityError(ValueError):
    """Two model configurations cannot be combined."""


class GenerationError(RuntimeError):
    """Random mask generation could not satisfy its constraints."""


class NumericDivergenceError(RuntimeError):
    """A sampling or training iterate became non-finite."""


class TrainingError(RuntimeError):
    """Training failed (divergence or invalid setup)."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint file problems."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint format version is not recognized."""


class MissingTensorError(CheckpointError):
    """A required tensor is absent from the checkpoint index."""


class TruncatedPayloadError(CheckpointError):
    """The binary payload is shorter than the index claims."""
