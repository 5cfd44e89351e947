"""Exception hierarchy for the gsim package."""


class GSIMError(Exception):
    """Base class for all gsim errors."""


class DomainError(GSIMError, ValueError):
    """A natural-parameter value lies outside the family's domain."""


class DataError(GSIMError, ValueError):
    """Input data is unusable (invalid responses, degenerate covariates, bad CSV)."""


class ConstraintError(GSIMError, ValueError):
    """A hypothesis constraint matrix is invalid."""


class UsageError(GSIMError, ValueError):
    """An operation was called with incompatible or nonsensical arguments."""


class FitError(GSIMError, RuntimeError):
    """Model fitting failed."""


class ConvergenceError(FitError):
    """An iterative solve did not converge; carries the last iterate."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class StudyError(GSIMError, RuntimeError):
    """A simulation study had too many replicate failures to report."""
