"""Exception types raised across the package.

Plain ``ValueError`` is used for ordinary argument mistakes (bad counts,
out-of-range levels).  The classes below mark failures a caller may want to
handle specifically: invalid stochastic models, numerical breakdowns, and
external-model protocol errors.
"""


class TailriskError(Exception):
    """Base class for package-specific errors."""


class InvalidModelError(TailriskError, ValueError):
    """An input model violates a construction invariant."""


class UnsupportedDimensionError(TailriskError, ValueError):
    """The requested sampler cannot handle the input dimension."""


class PositiveDefinitenessError(TailriskError):
    """A matrix required to be positive definite is not.

    ``pivot`` is the 1-based index of the failing Cholesky pivot when known.
    """

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class MomentMatrixError(TailriskError):
    """The estimated moment matrix is numerically unusable."""


class DegenerateTrainingError(TailriskError, ValueError):
    """Training data cannot support an interpolating fit (duplicate points)."""


class ConditioningError(TailriskError):
    """A least-squares system is too ill-conditioned to solve reliably."""


class OptimizationError(TailriskError):
    """Hyperparameter search failed on every start."""


class InsufficientMassError(TailriskError):
    """A weighted sample carries less mass than the requested tail level."""


class DatasetLookupError(TailriskError, KeyError):
    """A dataset-backed model has no row for the queried input."""


class EvaluationError(TailriskError):
    """An external model evaluation failed (bad output, crash, timeout)."""


class ArtifactError(TailriskError, ValueError):
    """A serialized artifact is unreadable or has an incompatible version."""
