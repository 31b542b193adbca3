"""Exception types raised by the SWLE toolkit.

Each exception carries the payload the caller needs to act on the failure
(offending parameter, searched interval, condition number, trace ...).
"""
from typing import Any, Dict, List, Optional, Tuple


class SwleError(Exception):
    """Base class for all toolkit errors"""


class DomainError(SwleError, ValueError):
    """A parameter or response lies outside the family's valid region"""

    def __init__(self, message: str, parameter: Optional[str] = None, value: Any = None):
        super().__init__(message)
        self.parameter = parameter
        self.value = value


class CalibrationError(SwleError):
    """Weight hyperparameters cannot be constructed or calibrated"""

    def __init__(self, message: str, constraint: Optional[str] = None,
                 searched_range: Optional[Tuple[float, float]] = None):
        super().__init__(message)
        self.constraint = constraint
        self.searched_range = searched_range


class ConvergenceError(SwleError):
    """An iterative solver stopped before meeting its tolerance"""

    def __init__(self, message: str, trace: Optional[List[Dict[str, float]]] = None):
        super().__init__(message)
        self.trace = trace or []


class BracketError(SwleError, ValueError):
    """A scalar root is not bracketed by the supplied interval"""

    def __init__(self, message: str, interval: Tuple[float, float],
                 values: Optional[Tuple[float, float]] = None):
        super().__init__(message)
        self.interval = interval
        self.values = values


class SingularMatrixError(SwleError):
    """A matrix is numerically singular; no regularization is applied"""

    def __init__(self, message: str, condition: float = float("inf"), label: Optional[str] = None):
        super().__init__(message)
        self.condition = condition
        self.label = label


class QuadratureError(SwleError):
    """Adaptive quadrature did not reach the requested tolerance"""

    def __init__(self, message: str, estimate: float, error_bound: float):
        super().__init__(message)
        self.estimate = estimate
        self.error_bound = error_bound


class OverflowExponentError(SwleError, OverflowError):
    """The bias-adjustment exponent is too large to exponentiate"""

    def __init__(self, message: str, exponent: float):
        super().__init__(message)
        self.exponent = exponent


class DatasetError(SwleError, ValueError):
    """A dataset file could not be ingested"""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        if location:
            message = f"{', '.join(location)}: {message}"
        super().__init__(message)
        self.row = row
        self.column = column


class ConfigError(SwleError, ValueError):
    """The run configuration is invalid"""


class StudyError(SwleError):
    """Too many replications of a simulation study failed"""

    def __init__(self, message: str, summary: Any = None):
        super().__init__(message)
        self.summary = summary
