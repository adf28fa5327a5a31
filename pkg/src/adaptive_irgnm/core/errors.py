from typing import Any


class IrgnmError(RuntimeError):
    """Base class for runtime failures of the solver stack"""


class StateSolveError(IrgnmError):
    def __init__(self, message: str, q_min: float | None = None):
        super().__init__(message)
        self.q_min = q_min


class SubproblemError(IrgnmError):
    pass


class BetaSearchError(IrgnmError):
    def __init__(self, message: str, history: list[Any] | None = None):
        super().__init__(message)
        self.history = history or []


class ConvergenceError(IrgnmError):
    def __init__(self, message: str, residuals: list[float] | None = None):
        super().__init__(message)
        self.residuals = residuals or []


class IterationError(IrgnmError):
    def __init__(self, message: str, step: int, report: Any = None):
        super().__init__(message)
        self.step = step
        self.report = report


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class ConfigValidationError(ValueError):
    def __init__(self, violations: list[Any]):
        names = ", ".join(v.name for v in violations)
        super().__init__(f"Constants violate: {names}")
        self.violations = violations


class NestingError(ValueError):
    pass
