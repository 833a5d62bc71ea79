"""Exception types shared across the package."""


class DabaError(Exception):
    """Base class for all library errors."""


class DegenerateGeometry(DabaError, ValueError):
    """A camera center and an observed point (nearly) coincide."""

    def __init__(self, message, observation=None):
        super().__init__(message)
        self.observation = observation


class PointBehindCamera(UserWarning):
    """Emitted by the pixel metric when observations project from behind a camera."""


class MissingNeighborState(DabaError, KeyError):
    """A foreign variable needed to build a surrogate is absent from the snapshot."""


class LinearSolveFailure(DabaError):
    """The damped reduced camera system could not be factorized."""


class ProtocolViolation(DabaError):
    """A message violated the superstep exchange protocol."""


class ParseError(DabaError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CountMismatch(ParseError):
    """Header counts and file body disagree, or an index is out of range."""


class SchemaVersionMismatch(DabaError):
    pass


class NearSingularProjection(RuntimeWarning):
    """Rotation projection of a matrix whose nearest rotation is not unique."""
