"""Sympathetic cooling of spin-chain quantum simulators by a single dissipative bath spin."""

from .errors import (
    CapacityError,
    EvaluationError,
    IntegrationError,
    NotConvergedError,
    PartialResultError,
    SympacoolError,
    ValidationError,
)
from .operators import BathSpec, DecoherenceSpec, ModelKind, ModelSpec
from .protocol import InitialState, RunSpec, run_cooling

__version__ = "0.1.0"

__all__ = [
    "BathSpec",
    "CapacityError",
    "DecoherenceSpec",
    "EvaluationError",
    "InitialState",
    "IntegrationError",
    "ModelKind",
    "ModelSpec",
    "NotConvergedError",
    "PartialResultError",
    "RunSpec",
    "SympacoolError",
    "ValidationError",
    "run_cooling",
    "__version__",
]
