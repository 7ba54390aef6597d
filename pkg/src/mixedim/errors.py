"""Exception and warning types shared across the package."""


class MixedIMError(Exception):
    """Base class for all package errors."""


class ParseError(MixedIMError):
    """CSV or config input could not be parsed (missing column, bad cell)."""


class ValidationError(MixedIMError):
    """Structurally valid input violates a model invariant."""


class RankDeficientDesign(ValidationError):
    """Fixed-effects design X does not have full column rank."""


class DegenerateSpectrum(ValidationError):
    """Fewer than two distinct eigenvalue clusters; no identifiable variance split."""


class DegenerateData(ValidationError):
    """A residual sum of squares is (numerically) zero; downstream logs would blow up."""


class DomainError(MixedIMError):
    """Numeric argument outside its mathematical domain (e.g. rho outside (0,1))."""


class UsageError(MixedIMError):
    """API misuse: missing required argument or unsupported combination."""


class EstimationError(MixedIMError):
    """Variance-component estimation failed or too many resample fits failed."""


class UnboundedDenominator(MixedIMError):
    """The variance-ratio supremum diverges (a retained eigenvalue is zero)."""


class EmptyCut(MixedIMError):
    """Contour never reaches the cut level at its own center; raise m instead."""


class BracketError(MixedIMError):
    """Bracketing failed or the contour looked non-monotone along the bracket."""


class TuningFailure(UserWarning):
    """Sampler acceptance rate left [0.1, 0.6] after adaptation."""


class BoundaryWarning(UserWarning):
    """Estimate pinned at the boundary of the parameter space."""
