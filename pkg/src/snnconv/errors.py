"""Exception types raised across the toolkit."""


class SNNConvError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(SNNConvError, ValueError):
    """A layer received an input whose shape it cannot consume."""

    def __init__(self, index, expected, actual, message=None):
        self.index = index
        self.expected = expected
        self.actual = actual
        msg = message or f"layer {index}: expected input shape {expected}, got {actual}"
        super().__init__(msg)


class UnsupportedLayerError(SNNConvError):
    def __init__(self, index, kind, what="training"):
        self.index = index
        self.kind = kind
        super().__init__(f"layer {index} ({kind}) is unsupported for {what}")


class TransformError(SNNConvError):
    """A graph rewrite could not be applied."""


class NormalizationError(TransformError):
    def __init__(self, index, value):
        self.index = index
        self.value = value
        super().__init__(
            f"layer {index} has non-positive activation scale {value!r} (dead layer)"
        )


class TrainingDivergedError(SNNConvError):
    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"loss became {loss} at epoch {epoch}, batch {batch}")


class ConversionError(SNNConvError):
    """The ANN cannot be mapped onto integrate-and-fire neurons."""


class SimulationError(SNNConvError):
    pass


class StreamFormatError(SNNConvError, ValueError):
    """A spike stream file is corrupt or of an unknown format."""


class ConfigError(SNNConvError, ValueError):
    pass
