"""Exception types shared across the workbench."""


class WorkbenchError(Exception):
    """Base class for domain errors (the CLI maps these to exit code 1)."""


class SpecError(WorkbenchError, ValueError):
    """An architecture or block description violates its invariants."""


class ShapeError(WorkbenchError, ValueError):
    pass


class GuardError(WorkbenchError, ValueError):
    """Input exceeds a tractability guard."""


class LPFailure(WorkbenchError, RuntimeError):
    pass


class DivergenceError(WorkbenchError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DataError(WorkbenchError, ValueError):
    pass
