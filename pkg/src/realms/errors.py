"""Exception hierarchy shared by every module."""


class RealmsError(Exception):
    """Base class for library errors."""


class DimensionError(RealmsError, ValueError):
    pass


class ProjectorError(RealmsError, ValueError):
    """An operator failed the Hermitian-idempotent test."""


class NonHermitianError(RealmsError, ValueError):
    pass


class NonCommutingError(RealmsError, ValueError):
    pass


class NotSystemLocalError(RealmsError, ValueError):
    """A projector does not act as P_s (x) I_e under a factorization."""


class StrongDecoherenceError(RealmsError):
    """Records were requested for a family that does not strongly decohere."""


class BoundaryError(RealmsError, ValueError):
    """An eigenvalue sits on an interior range boundary."""

    def __init__(self, message, boundary, suggestion):
        super().__init__(message)
        self.boundary = boundary
        self.suggestion = suggestion


class TreeError(RealmsError, ValueError):
    pass


class UnknownLabelError(RealmsError, KeyError):
    pass


class ScenarioError(RealmsError, ValueError):
    """A scenario file failed to parse or validate."""
