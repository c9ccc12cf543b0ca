"""Exception hierarchy shared by all fluematch modules."""


class FluematchError(Exception):
    pass


class OutOfRangeParam(FluematchError, ValueError):
    def __init__(self, name, value, low, high):
        self.name = name
        self.value = value
        super().__init__(f"parameter {name}={value!r} outside [{low}, {high}]")


class UnrepresentablePitch(FluematchError, ValueError):
    pass


class RenderError(FluematchError):
    """Raised by render_batch; carries the index of the failing item."""

    def __init__(self, index, cause):
        self.index = index
        self.cause = cause
        super().__init__(f"item {index}: {cause}")


class ToneTooShort(FluematchError, ValueError):
    pass


class PitchMismatch(FluematchError, ValueError):
    pass


class SampleRateMismatch(FluematchError, ValueError):
    pass


class MetricError(FluematchError):
    def __init__(self, metric_id, cause):
        self.metric_id = metric_id
        self.cause = cause
        super().__init__(f"{metric_id}: {cause}")


class DimensionMismatch(FluematchError, ValueError):
    pass


class NonFiniteLoss(FluematchError, ArithmeticError):
    def __init__(self, epoch=None, msg="non-finite loss"):
        self.epoch = epoch
        super().__init__(msg if epoch is None else f"{msg} at epoch {epoch}")


class DatasetTooSmall(FluematchError, ValueError):
    pass


class AllCandidatesFailed(FluematchError):
    pass


class EmptyDataset(FluematchError):
    pass


class TooFewStops(FluematchError, ValueError):
    pass


class UnreadableFile(FluematchError, OSError):
    pass


class UnsupportedEncoding(FluematchError, ValueError):
    pass


class PitchSanityWarning(UserWarning):
    """Dominant spectral peak is far from the labelled note."""


class BandAboveNyquistWarning(UserWarning):
    pass


class StageError(FluematchError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
