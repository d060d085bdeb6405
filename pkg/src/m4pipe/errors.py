"""Exception hierarchy shared by every module.

The CLI maps any :class:`M4Error` to exit code 2 (data/validation error);
anything else escaping a command is treated as an internal error.
"""


class M4Error(Exception):
    """Base class for all pipeline errors."""


class InvalidArgumentError(M4Error, ValueError):
    pass


class BoundsError(InvalidArgumentError, IndexError):
    pass


class UnsupportedDimensionError(InvalidArgumentError):
    pass


class CorruptStreamError(M4Error):
    """A byte stream failed validation; ``offset`` locates the problem."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class StoreCorruptError(CorruptStreamError):
    pass


class KeyNotFoundError(M4Error, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "key not found"


class StoreBuildError(M4Error):
    pass


class InsufficientDataError(M4Error):
    pass


class DegenerateGeometryError(M4Error):
    pass


class NonConvergenceError(M4Error):
    def __init__(self, message, residual):
        self.residual = residual
        super().__init__(f"{message} (last mean residual {residual:.6g} px)")


class BehindCameraError(InvalidArgumentError):
    pass


class NoTriggerError(M4Error):
    pass


class NoTargetError(M4Error):
    pass


class TrainingDivergedError(M4Error):
    def __init__(self, step):
        self.step = step
        super().__init__(f"training diverged at step {step}: loss is not finite")


class InfeasibleSplitError(M4Error):
    pass
