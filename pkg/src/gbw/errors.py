"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class EmptyBatchError(InvalidInputError):
    """Raised when every pixel of a batch is ignored."""


class UnsupportedSizeError(InvalidInputError):
    """Raised when a problem is too large for an exhaustive routine."""


class DivergedRunError(RuntimeError):
    """Raised when training produces a non-finite loss or parameter.

    The failing step index is kept on ``step``.
    """

    def __init__(self, step, message=None):
        self.step = int(step)
        super().__init__(message or f"training diverged at step {self.step}")
