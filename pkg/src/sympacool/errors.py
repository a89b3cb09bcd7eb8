"""Exception hierarchy shared by every sympacool module."""

from __future__ import annotations


class SympacoolError(Exception):
    """Base class for all library errors."""


class ValidationError(SympacoolError, ValueError):
    """An input violates a documented precondition."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class CapacityError(SympacoolError):
    """The requested Hilbert space exceeds the configured size cap."""


class IntegrationError(SympacoolError, ArithmeticError):
    """Time integration failed (jump localisation, dark-state corner, ...)."""

    def __init__(self, message: str, trajectory: int | None = None):
        if trajectory is not None:
            message = f"trajectory {trajectory}: {message}"
        super().__init__(message)
        self.trajectory = trajectory


class NotConvergedError(SympacoolError, ArithmeticError):
    """A target was not reached within the simulated time or budget."""


class EvaluationError(SympacoolError, ArithmeticError):
    """An objective function returned a non-finite value."""

    def __init__(self, message: str, params: dict | None = None):
        super().__init__(message)
        self.params = params


class PartialResultError(SympacoolError):
    """Some items of a batch study failed; the rest are attached."""

    def __init__(self, message: str, failures: dict, partial=None):
        super().__init__(message)
        self.failures = failures
        self.partial = partial
