"""Escape metrics on R^n: certification, geodesic escape, wave decay."""

from .errors import (
    CFLViolationError,
    DomainError,
    FormulaMismatchError,
    HypothesisViolationError,
    InapplicableTheoremError,
    MetricError,
    NonPositiveDefiniteError,
    NotTangentError,
    ParameterError,
    StepIntoDomainError,
)
from .metrics import (
    CertificationReport,
    MetricField,
    SampleSpec,
    TangentFrame,
    build_escape_metric,
    build_exterior_escape_metric,
    certify_escape,
    christoffel,
    cylinder_metric,
    euclidean_metric,
    evaluate_G,
    evaluate_dG_dr,
    hessian_r,
    laplacian_r,
    make_metric,
    metric_from_spec,
    radial_exp_metric,
    radial_power_metric,
    tabulated_metric,
    tangent_frame,
)
from .geodesics import (
    EscapeReport,
    GeodesicState,
    GeodesicTrace,
    batch_shoot,
    check_theorem_integral_bound,
    check_theorem_velocity_bound,
    exterior_dichotomy,
    geodesic_rhs,
    integrate_batch,
    integrate_geodesic,
    reflect_at_inner_boundary,
    unit_speed_velocity,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
