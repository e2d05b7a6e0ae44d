"""Exception taxonomy shared across the toolkit."""

from __future__ import annotations


class AgepdeError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(AgepdeError, ValueError):
    """A scalar argument or configuration value violates its contract."""


class DomainError(AgepdeError, ValueError):
    """A sub-box or interval is empty, out of bounds, or otherwise unusable."""


class ShapeError(AgepdeError, ValueError):
    """Fields or arrays do not live on the same grid / have wrong shape."""


class SingularityError(AgepdeError, ValueError):
    """A weight was evaluated at a point where it blows up."""


class SolverError(AgepdeError, RuntimeError):
    """A linear solve broke down (non-finite values, failed factorization)."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ConvergenceError(AgepdeError, RuntimeError):
    """An iterative method ran out of iterations.

    Carries the partial result so callers can inspect the trace.
    """

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class ConsistencyError(AgepdeError, RuntimeError):
    """Two routes to the same quantity disagreed beyond tolerance."""
