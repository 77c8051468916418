from typing import Optional


class FinslerLabError(Exception):
    """Base class for every error raised by the lab."""


class DomainError(FinslerLabError, ValueError):
    pass


class InvalidMetricError(FinslerLabError):
    def __init__(self, message: str, value: Optional[float] = None):
        super().__init__(message)
        self.value = value


class DegenerateFlagError(DomainError):
    pass


class ConvergenceError(FinslerLabError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class StabilityError(FinslerLabError):
    def __init__(self, message: str, ratio: float):
        super().__init__(message)
        self.ratio = ratio


class ParameterError(FinslerLabError):
    pass


class InfeasibleError(FinslerLabError):
    pass


class NotApplicableError(FinslerLabError):
    pass


class ScenarioError(FinslerLabError):
    def __init__(
        self, message: str, line: Optional[int] = None, column: Optional[int] = None
    ):
        where = f" at line {line}, column {column}" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.line = line
        self.column = column
