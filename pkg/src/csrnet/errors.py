"""Exception hierarchy shared by every csrnet module."""


class CSRNetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CSRNetError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class DegenerateInputError(CSRNetError, ValueError):
    """A norm or denominator fell below the numerical degeneracy threshold."""


class DivergenceError(CSRNetError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ConfigError(CSRNetError, ValueError):
    """A model, training or CLI configuration violates an invariant."""


class CheckpointError(CSRNetError):
    """Base class for checkpoint decoding failures."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class ParameterShapeError(CheckpointError):
    pass


class DatasetError(CSRNetError):
    """Base class for paired-dataset loading failures."""


class MissingPairError(DatasetError):
    pass


class PairDimensionError(DatasetError):
    pass


class UndecodableImageError(DatasetError):
    pass


class UnsupportedFormatError(DatasetError):
    pass
