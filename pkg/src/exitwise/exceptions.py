"""Exception hierarchy shared across the package."""


class ExitwiseError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ExitwiseError, ValueError):
    """Raised when an argument violates a documented precondition."""


class DataFormatError(ExitwiseError, ValueError):
    """Raised when a dataset, exit log or checkpoint file is malformed."""


class TrainingDivergedError(ExitwiseError, RuntimeError):
    """Raised when the loss or the gradients stop being finite."""


class StaleCacheError(ExitwiseError, RuntimeError):
    """Raised when a forward cache does not belong to the current parameters."""
