"""Exception types raised across the package."""


class HaarNetError(Exception):
    """Base class for all package errors."""


class ShapeError(HaarNetError, ValueError):
    """Operand extents are incompatible with an operation."""


class ContractError(HaarNetError, ValueError):
    """A documented precondition was violated by the caller."""


class GraphStateError(HaarNetError, RuntimeError):
    """Backward was requested on a graph that has already been consumed."""


class ConfigurationError(HaarNetError, ValueError):
    """A layer or run was configured with values it cannot honour."""


class FormatError(HaarNetError, ValueError):
    """A file does not follow the expected on-disk layout.

    Args:
        message: What went wrong.
        offset: Byte offset at which the problem was detected, if known.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class TrainingError(HaarNetError, RuntimeError):
    """Training cannot continue, e.g. the loss became non-finite."""
