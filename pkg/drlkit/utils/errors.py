"""Exception hierarchy for drlkit.

Every error raised on purpose by the toolkit derives from ``DRLError`` and
also from the closest builtin, so callers can catch either.
"""


class DRLError(Exception):
    """Base class for toolkit errors."""


class ShapeError(DRLError, ValueError):
    """Shapes are not broadcastable or a geometry is incompatible."""


class LabelError(DRLError, ValueError):
    """A class label is outside [0, C)."""


class NonFiniteError(DRLError, ArithmeticError):
    """A forward value or gradient contains NaN or Inf."""


class GradError(DRLError, RuntimeError):
    """backward() was called on something it cannot differentiate."""


class ConfigError(DRLError, ValueError):
    """A configuration record is invalid."""


class CheckpointError(DRLError):
    """Base class for checkpoint persistence failures."""


class CorruptCheckpointError(CheckpointError, ValueError):
    """Checkpoint bytes fail the magic, length or digest checks."""


class CheckpointVersionError(CheckpointError, ValueError):
    """Checkpoint was written by an unsupported format version."""


class DatasetFormatError(DRLError, ValueError):
    """A dataset directory or manifest is malformed."""


class ChecksumMismatchError(DatasetFormatError):
    """The image blob does not match the checksum in the manifest."""


class DatasetVersionError(DatasetFormatError):
    """The dataset manifest declares an unsupported format version."""


class PixelRangeError(DatasetFormatError):
    """An image holds values outside the valid input range."""


class SelectionError(DRLError, ValueError):
    """Selection size out of range or unknown pair id."""


class DivergenceError(DRLError, ArithmeticError):
    """Training produced a non-finite loss."""


class OneShotViolationError(DRLError, RuntimeError):
    """The augmented dataset changed while a model was training on it."""


class EvaluationError(DRLError, ValueError):
    """An evaluation set is empty or misses a class."""


class ProvenanceError(DRLError, ValueError):
    """A threat setting needs training provenance that was not supplied."""


class MissingArtifactError(DRLError, FileNotFoundError):
    """A checkpoint, dataset or report the command depends on is absent."""
