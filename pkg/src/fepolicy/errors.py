"""Exception types raised across the package."""


class FepolicyError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(FepolicyError):
    """A Cholesky pivot was not strictly positive."""


class ShapeMismatch(FepolicyError, ValueError):
    pass


# Problem-level name for the same failure.
DimensionMismatch = ShapeMismatch


class NonFiniteState(FepolicyError):
    """A rollout produced NaN or Inf in the state."""


class NotConverged(FepolicyError):
    """Open-loop solve stopped before reaching the gradient tolerance.

    The best iterate found is attached as ``trajectory`` so that callers can
    decide whether to keep it.
    """

    def __init__(self, message, trajectory=None, diagnostics=None):
        super().__init__(message)
        self.trajectory = trajectory
        self.diagnostics = diagnostics or {}


class DatagenFailure(FepolicyError):
    """Too many trajectories in a dataset failed to converge."""


class DivergedTraining(FepolicyError):
    pass


class UnsupportedTaskKind(FepolicyError, ValueError):
    pass


class BasisMismatch(FepolicyError):
    """An operator network was paired with a basis it was not trained on."""


class FormatVersionMismatch(FepolicyError):
    pass


class HeaderMismatch(FormatVersionMismatch):
    """File header disagrees with the problem it claims to describe."""


class ChecksumFailure(FepolicyError):
    pass


class TruncatedFile(FepolicyError):
    pass


class ConfigError(FepolicyError, ValueError):
    pass
