"""Decentralized, accelerated bundle adjustment by majorization-minimization."""
from .errors import (
    CountMismatch,
    DabaError,
    DegenerateGeometry,
    LinearSolveFailure,
    MissingNeighborState,
    NearSingularProjection,
    ParseError,
    PointBehindCamera,
    ProtocolViolation,
    SchemaVersionMismatch,
)
from .geometry import CameraState, LossFunction, Observation, PointState, ProblemInstance, State

__version__ = "0.1.0"

__all__ = [
    "CameraState",
    "CountMismatch",
    "DabaError",
    "DegenerateGeometry",
    "LinearSolveFailure",
    "LossFunction",
    "MissingNeighborState",
    "NearSingularProjection",
    "Observation",
    "ParseError",
    "PointBehindCamera",
    "PointState",
    "ProblemInstance",
    "ProtocolViolation",
    "SchemaVersionMismatch",
    "State",
]
