"""Exception hierarchy shared by all koopa modules."""


class KoopaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(KoopaError, ValueError):
    """Operands have incompatible dimensions; the message names both shapes."""


class NumericError(KoopaError, ArithmeticError):
    """An iterative numeric routine failed to converge or produced non-finite values."""


class StateError(KoopaError, RuntimeError):
    """A cached object (e.g. a gradient tape) does not match the call it is used with."""


class DataError(KoopaError, ValueError):
    """Dataset ingestion or splitting failed; messages carry line/row coordinates."""


class ConfigError(KoopaError, ValueError):
    """A configuration file or override is malformed or inconsistent."""


class CheckpointError(KoopaError, OSError):
    """A checkpoint file is missing, corrupt, or of an unsupported version."""


class MetricError(KoopaError, ValueError):
    """A metric is undefined for the given inputs (e.g. zero MASE denominator)."""


class StreamError(KoopaError, ValueError):
    """An adaptation stream delivered an unusable (non-finite) embedding."""


class TrainingError(KoopaError, RuntimeError):
    """Training diverged; carries the epoch/batch where it happened."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
