from typing import Any, Optional


class MetriforgeError(Exception):
    pass


class DimensionError(MetriforgeError, ValueError):
    pass


class ContractError(MetriforgeError):
    pass


class ResourceError(MetriforgeError):
    pass


class DomainError(MetriforgeError, ValueError):
    pass


class UnsupportedError(MetriforgeError, NotImplementedError):
    pass


class NumericError(MetriforgeError, ArithmeticError):
    def __init__(self, message: str, term: Optional[str] = None):
        super().__init__(message)
        self.term = term


class ConvergenceError(NumericError):
    def __init__(
        self,
        message: str,
        residual: float,
        iterations: int,
        field: Optional[int] = None,
    ):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.field = field


class TrainingAborted(NumericError):
    def __init__(self, message: str, step: int, last_params: Any):
        super().__init__(message)
        self.step = step
        self.last_params = last_params
