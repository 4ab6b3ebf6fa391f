class PipefreezeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PipefreezeError, ValueError):
    pass


class DomainError(PipefreezeError, ValueError):
    pass


class ScheduleConsistencyError(PipefreezeError):
    """The dependency graph of a schedule contains a cycle."""


class StructuralError(PipefreezeError):
    """A node of the dependency graph is disconnected from source or destination."""


class InsufficientMonitoringError(PipefreezeError):
    pass


class NumericalFailureError(PipefreezeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConsistencyError(PipefreezeError):
    pass


class DivergenceError(PipefreezeError):
    def __init__(self, step, norm):
        super().__init__(f"iterate diverged at step {step} (|theta|={norm:.3e})")
        self.step = step
        self.norm = norm
