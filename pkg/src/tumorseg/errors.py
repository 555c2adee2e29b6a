"""Exception types shared across the pipeline."""


class TumorSegError(Exception):
    """Base class for all pipeline errors."""


# --- ingest ---------------------------------------------------------------

class MissingField(TumorSegError):
    """A required dataset field is absent from a record file."""


class ShapeMismatch(TumorSegError):
    """Two arrays that must share a shape do not."""


class UnsupportedContainer(TumorSegError):
    """The file is not a v7.3 (HDF5) MAT container with the expected layout."""


class IoFailure(TumorSegError):
    """Reading or writing an artifact failed at the OS level."""


class DuplicateStem(TumorSegError):
    """Two exported records would share an output file stem."""


class CountMismatch(TumorSegError):
    """Requested split sizes do not add up to the number of records."""


# --- blocks / models ------------------------------------------------------

class ChannelMismatch(TumorSegError):
    """Input channel count differs from what the block was built for."""


class SpatialMismatch(TumorSegError):
    """Spatial sizes violate the block's resolution contract."""


class RatioError(TumorSegError):
    """Squeeze-excitation reduction ratio does not divide the channel count."""


class EmptyRates(TumorSegError):
    """ASPP was configured with no dilation rates."""


class InvalidBackbone(TumorSegError):
    """The requested backbone cannot be combined with this model family."""


class BadInputSize(TumorSegError):
    """Input size is not divisible by the model's total downsampling factor."""


class ConfigMismatch(TumorSegError):
    """Checkpoint sidecar and requested architecture disagree."""


# --- training -------------------------------------------------------------

class NonFiniteGradient(TumorSegError):
    """An optimizer step received NaN or Inf gradients."""


class EmptySplit(TumorSegError):
    """A split referenced for training or evaluation holds no records."""


class DivergedLoss(TumorSegError):
    """Training produced a non-finite loss; carries the history so far."""

    def __init__(self, message="training loss became non-finite", history=None):
        super().__init__(message)
        self.history = history


class EmptyHistory(TumorSegError):
    """Checkpoint selection was asked to pick from an empty run history."""


# --- metrics / reporting --------------------------------------------------

class BadThreshold(TumorSegError):
    """Binarization threshold must lie strictly between 0 and 1."""


class MixedSplit(TumorSegError):
    """A comparison set mixes reports from different splits or thresholds."""


class MissingPrediction(TumorSegError):
    """A qualitative grid sample has no usable image, mask, or prediction."""
