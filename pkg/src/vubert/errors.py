"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class TruncationError(ValueError):
    """An assembled sequence would exceed the configured length budget."""


class DataError(ValueError):
    """Input data is malformed or internally inconsistent."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""
