"""Exception hierarchy shared across the package."""

from __future__ import annotations


class PooledWeightsError(Exception):
    """Base class for every error raised by this package."""


class SchemaError(PooledWeightsError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ParseError(PooledWeightsError, ValueError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class ValidationError(PooledWeightsError, ValueError):
    pass


class DegenerateKnotsError(PooledWeightsError, ValueError):
    pass


class ConstraintViolationError(PooledWeightsError, ValueError):
    def __init__(self, message: str, violated: list[str] | None = None):
        super().__init__(message)
        self.violated = violated or []


class InfeasibleBalanceError(PooledWeightsError, RuntimeError):
    """No nonnegative weights satisfy the exact global balance constraints."""

    def __init__(self, message: str, feature: str | None = None, violation: float | None = None):
        super().__init__(message)
        self.feature = feature
        self.violation = violation


class NumericError(PooledWeightsError, ArithmeticError):
    pass


class ConvergenceError(PooledWeightsError, RuntimeError):
    def __init__(self, message: str, gradient_norm: float | None = None):
        super().__init__(message)
        self.gradient_norm = gradient_norm


class OverlapError(PooledWeightsError, ValueError):
    pass


class DegenerateStratumError(PooledWeightsError, ValueError):
    pass


class BootstrapError(PooledWeightsError, RuntimeError):
    """Too many bootstrap replicates failed to produce weights."""

    def __init__(self, message: str, dropped: int = 0, total: int = 0):
        super().__init__(message)
        self.dropped = dropped
        self.total = total
