"""Exception types raised across the package."""


class MEUNError(Exception):
    """Base class for all package errors."""


class ShapeError(MEUNError, ValueError):
    pass


class RankError(ShapeError):
    pass


class UnsupportedKernelError(MEUNError, ValueError):
    pass


class EmptyInputError(MEUNError, ValueError):
    pass


class DegenerateBatchError(MEUNError, ValueError):
    """Batch statistics requested over a single element."""


class NoTapeError(MEUNError, RuntimeError):
    """Backward called on a tensor that is not recorded on a live tape."""


class ConfigError(MEUNError, ValueError):
    pass


class DepthError(MEUNError, ValueError):
    """A U-block was applied to a feature map too small for its pooling depth."""


class PoolDegeneracyError(MEUNError, ValueError):
    pass


class WiringError(ShapeError):
    def __init__(self, stage: str, detail: str):
        super().__init__(f"wiring error at {stage}: {detail}")
        self.stage = stage


class NetPBMError(MEUNError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedDepthError(MEUNError, ValueError):
    pass


class EmptyDatasetError(MEUNError, ValueError):
    pass


class CheckpointError(MEUNError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError, ShapeError):
    def __init__(self, name: str, detail: str):
        super().__init__(f"parameter {name!r}: {detail}")
        self.name = name


class NonFiniteLossError(MEUNError, FloatingPointError):
    pass
