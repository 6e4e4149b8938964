"""Exception types shared across the package."""


class MetricError(Exception):
    """Base class for metric evaluation failures."""


class NonPositiveDefiniteError(MetricError):
    """The metric matrix lost positive definiteness at a queried point."""

    def __init__(self, x, message=""):
        self.x = x
        super().__init__(message or f"metric not positive definite at x={x}")


class DomainError(MetricError):
    """The queried point lies outside the metric's domain of definition."""


class NotTangentError(MetricError):
    """A vector passed as sphere-tangent is not orthogonal to the base point."""


class ParameterError(MetricError):
    """Construction parameters violate an admissibility condition."""


class FormulaMismatchError(MetricError):
    """Closed-form and Christoffel-based values of a geometric quantity disagree."""


class StepIntoDomainError(MetricError):
    """A trajectory stepped out of the metric's domain (e.g. across the inner radius)."""


class InapplicableTheoremError(Exception):
    """The hypotheses of the requested escape bound fail for this metric."""


class HypothesisViolationError(Exception):
    """A wave-experiment parameter set violates its standing assumptions."""


class CFLViolationError(Exception):
    """The requested time step exceeds the stability limit of the scheme."""
