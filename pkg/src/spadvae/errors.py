"""Exception types raised across the package."""


class SpadVaeError(Exception):
    """Base class for all errors raised by spadvae."""


class ShapeError(SpadVaeError, ValueError):
    """An array has the wrong extent along a named dimension."""

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class BackwardError(SpadVaeError, RuntimeError):
    pass


class NonFiniteError(SpadVaeError, FloatingPointError):
    """A tensor that must be finite contains NaN or Inf."""

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


class NonFiniteLossError(NonFiniteError):
    def __init__(self, iteration, term):
        super().__init__(f"non-finite {term} loss at iteration {iteration}", name=term)
        self.iteration = iteration
        self.term = term


class FormatError(SpadVaeError, ValueError):
    """A binary file could not be decoded.

    ``offset`` is the byte position where decoding failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(FormatError):
    pass


class ConfigMismatchError(SpadVaeError, ValueError):
    pass
