class CornerCaseError(Exception):
    """Base class for errors raised by this package."""


class UsageError(CornerCaseError, ValueError):
    """Invalid arguments or configuration."""


class ShapeError(UsageError):
    """Input or layer shapes do not line up."""


class NumericalError(CornerCaseError, ArithmeticError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class TrainingError(CornerCaseError, RuntimeError):
    """Loss became non-finite during training."""


class DatasetError(CornerCaseError, OSError):
    """Base class for dataset loading failures."""


class BadMagicError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class CountMismatchError(DatasetError):
    pass
