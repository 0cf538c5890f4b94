class TurbmendError(Exception):
    """Base class for every error raised by turbmend."""


class ConfigurationError(TurbmendError, ValueError):
    """A scalar parameter or configuration value is out of range."""


class ShapeError(TurbmendError, ValueError):
    """An array is empty or its shape does not match what the operation needs."""


class RegistrationDivergedError(TurbmendError, RuntimeError):
    def __init__(self, message: str, ssd_history: list[float]):
        super().__init__(message)
        self.ssd_history = ssd_history


class SolverConvergenceError(TurbmendError, RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class UsageError(TurbmendError):
    """Bad command-line input: missing files, too few frames, mixed frame sizes."""
