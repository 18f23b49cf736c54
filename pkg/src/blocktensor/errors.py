"""Exception types raised across the package."""


class BlockTensorError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(BlockTensorError, ValueError):
    """An argument violates a precondition (shape, range, conformity)."""


class OwnershipError(BlockTensorError):
    """A rank touched a block it does not own."""


class UnsupportedGridError(BlockTensorError):
    """The process grid shape is not supported by the requested algorithm."""


class LayoutError(BlockTensorError):
    """Operand layouts are incompatible; the caller may redistribute and retry."""

    def __init__(self, message, dimension=None):
        super().__init__(message)
        self.dimension = dimension


class DeadlockError(BlockTensorError):
    """Every live rank worker is blocked on a receive that can never complete."""

    def __init__(self, message, blocked=None):
        super().__init__(message)
        self.blocked = dict(blocked or {})
