"""
Exception hierarchy for the mean-field control solver.
Numerical failures carry enough context to be logged and reported by the runner.
"""

from typing import Any, Dict, List, Optional


class MfcError(Exception):
    """Base class for all solver errors."""


class ShapeMismatchError(MfcError, ValueError):
    """Two arrays that must share a layout do not."""


class DimensionError(MfcError, ValueError):
    """An operation was asked for a state dimension it does not support."""


class AdaptednessError(MfcError, ValueError):
    """A field is not measurable with respect to the required time step."""


class RegressionRankError(MfcError):
    """The regression normal equations could not be solved."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConvergenceError(MfcError):
    """An iteration failed to reach its tolerance."""

    def __init__(self, message: str, best: Any = None, history: Optional[List[float]] = None):
        super().__init__(message)
        self.best = best
        self.history = history or []


class FeedbackConvergenceError(ConvergenceError):
    """Newton solve of the first-order condition did not converge at some point."""


class DivergenceError(ConvergenceError):
    """An iteration blew up; callers may retry with a smaller step or damping."""


class AssumptionGateError(MfcError):
    """A structural condition required before solving does not hold."""

    def __init__(self, message: str, value: Optional[float] = None):
        super().__init__(message)
        self.value = value


class MissingDerivativeError(MfcError, NotImplementedError):
    """A cost model does not provide a derivative the requested flow needs."""


class ConfigError(MfcError):
    """The run configuration failed validation."""

    def __init__(self, message: str, issues: Optional[List[str]] = None):
        super().__init__(message)
        self.issues = issues or []
