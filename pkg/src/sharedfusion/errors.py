"""Exception types shared across the package."""


class SharedFusionError(Exception):
    pass


class DimensionError(SharedFusionError, ValueError):
    """Operand shapes are incompatible."""


class GeometryError(SharedFusionError, ValueError):
    """Convolution/pooling geometry does not tile the input."""


class ContractError(SharedFusionError, RuntimeError):
    """An operation was called outside its precondition."""


class ConfigError(SharedFusionError, ValueError):
    pass


class DataError(SharedFusionError, ValueError):
    pass


class FormatError(DataError):
    """Binary container has the wrong magic or version."""


class CorruptionError(DataError):
    """Binary container is truncated or internally inconsistent."""


class UndefinedMetricError(SharedFusionError, ValueError):
    pass


class StateError(SharedFusionError, RuntimeError):
    pass


class TrainingDiverged(SharedFusionError, RuntimeError):
    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged (non-finite loss) in epoch {epoch}")


class MismatchError(SharedFusionError, ValueError):
    """Checkpoint does not belong to the given configuration."""
