"""Exception types shared across the toolkit."""


class GmkitError(Exception):
    """Base class for all gmkit errors."""


class DomainViolation(GmkitError):
    """A point lies outside the admissible set of a divergence or target."""


class InteriorViolation(GmkitError):
    """Second-slot argument on (or beyond) the boundary of a relative-interior domain."""


class MixedDomainTypes(GmkitError):
    """Separable components mix full and relative-interior domain types."""


class NonpositiveWeight(GmkitError):
    """Weight function evaluated to a nonpositive value where positivity is required."""


class MeanOnBoundary(GmkitError):
    """Distribution mean sits on the boundary, so the minimizer is not attained."""


class NumericalInconsistency(GmkitError):
    """A quantity violated its sign contract beyond the cancellation tolerance."""


class DimensionMismatch(GmkitError):
    """Vector dimensions disagree."""


class ZeroMass(GmkitError):
    """Reweighting constant is numerically zero."""


class UnboundedWeight(GmkitError):
    """Weight function exceeds the overflow guard on the sampling grid."""


class SingularTime(GmkitError):
    """Operation undefined at (or too close to) the terminal time."""


class ZeroVariance(GmkitError):
    """Accumulated diffusion variance is zero."""


class ZeroRate(GmkitError):
    """Total jump rate is zero where a jump distribution was requested."""


class SchedulerInvalid(GmkitError):
    """Interpolation scheduler violates its endpoint or monotonicity contract."""


class NonpositiveHazard(GmkitError):
    """Hazard must be strictly positive."""


class NonpositiveScaling(GmkitError):
    """Internal loss scaling a(t) or b(t) must be strictly positive."""


class TrajectoryDiverged(GmkitError):
    """A simulated trajectory produced a non-finite state."""


class RateBoundExceeded(GmkitError):
    """Thinning bound violated repeatedly; simulation aborted."""


class SupportMismatch(GmkitError):
    """Distributions live on incompatible supports."""


class Diverged(GmkitError):
    """Training loss exceeded the divergence threshold."""


class RequiresFiniteSpace(GmkitError):
    """Exact enumeration requested on a path without enumerable states."""


class ConfigError(GmkitError):
    """Malformed or unresolvable experiment configuration."""


class ModelFileCorrupt(GmkitError):
    """Model parameter file failed to parse."""


class EmptyResults(GmkitError):
    """No result records found to aggregate."""
