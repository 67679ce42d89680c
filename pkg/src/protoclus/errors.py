"""Exception and warning types raised across the package."""


class ProtoClusError(Exception):
    """Base class for all package errors."""


class ShapeError(ProtoClusError, ValueError):
    pass


class ZeroVectorError(ProtoClusError, ValueError):
    pass


class NonFiniteError(ProtoClusError, ValueError):
    pass


class LabelError(ProtoClusError, ValueError):
    pass


class ConsistencyError(ProtoClusError, ValueError):
    pass


class SampleCountError(ProtoClusError, ValueError):
    pass


class ConfigError(ProtoClusError, ValueError):
    pass


class SplitError(ProtoClusError, RuntimeError):
    pass


class EvalError(ProtoClusError, ValueError):
    pass


class FormatError(ProtoClusError, ValueError):
    """Malformed file on disk; ``offset`` is the byte offset of the problem, if known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConvergenceWarning(UserWarning):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, violation=float("nan")):
        super().__init__(message)
        self.violation = violation
