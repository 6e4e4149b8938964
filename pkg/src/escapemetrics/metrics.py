"""Radially normalized Riemannian metrics on R^n and escape-condition certification.

A metric field here is a symmetric positive definite matrix G(x) with
G(x)(x/|x|) = x/|x| outside an inner radius r_c, so |x| - r_c is the geodesic
distance to the sphere of radius r_c.  The module provides the built-in
families (euclidean, radial_power, radial_exp, cylinder), constructors that
assemble a metric from a declared tangential lower bound alpha and a
nonnegative forcing Q by integrating along rays, pointwise geometry
(dG/dr, Christoffel symbols, Hessian and Laplacian of the distance function),
and grid certification of the escape inequalities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import (
    DomainError,
    FormulaMismatchError,
    NonPositiveDefiniteError,
    NotTangentError,
    ParameterError,
)

FD_STEP_SCALE = 1e-5          # central-difference step factor for tabulated fields
SIMPSON_TOL = 1e-10           # relative tolerance of the ray quadrature
CERT_TOL = 1e-8               # default certification margin tolerance
RADIAL_NORMALIZATION_TOL = 1e-10
_TINY_R = 1e-12


# ---------------------------------------------------------------------------
# declared lower-bound profiles and forcing profiles

@dataclass(frozen=True)
class PowerAlpha:
    """alpha(r) = coef * r**exponent."""

    coef: float
    exponent: float = -1.0

    def __call__(self, r, u=None):
        return self.coef * np.asarray(r, float) ** self.exponent


@dataclass(frozen=True)
class ShiftedPowerAlpha:
    """alpha(r) = coef * r**exponent - 1/r."""

    coef: float
    exponent: float

    def __call__(self, r, u=None):
        r = np.asarray(r, float)
        return self.coef * r ** self.exponent - 1.0 / r


@dataclass(frozen=True)
class ScalarProfileQ:
    """Isotropic forcing q(r) = coef * r**exponent acting as q * I on sphere tangents."""

    coef: float
    exponent: float = 0.0

    def __call__(self, r, u=None):
        return self.coef * np.asarray(r, float) ** self.exponent


def alpha_from_spec(spec) -> Callable:
    """Build a declared lower-bound profile from its JSON-style description."""
    kind = spec.get("kind")
    if kind == "power":
        return PowerAlpha(float(spec["coef"]), float(spec.get("exponent", -1.0)))
    if kind == "shifted_power":
        return ShiftedPowerAlpha(float(spec["coef"]), float(spec["exponent"]))
    if kind == "zero":
        return PowerAlpha(0.0, 0.0)
    raise ParameterError(f"unknown alpha kind {kind!r}")


def q_from_spec(spec) -> Optional[Callable]:
    kind = spec.get("kind", "zero")
    if kind == "zero":
        return None
    if kind == "scalar_profile":
        return ScalarProfileQ(float(spec["coef"]), float(spec.get("exponent", 0.0)))
    raise ParameterError(f"unknown q_field kind {kind!r}")


# ---------------------------------------------------------------------------
# adaptive Simpson quadrature used by the ray constructors

def adaptive_simpson(f, a, b, tol=SIMPSON_TOL):
    """Adaptive Simpson integral of a scalar- or array-valued integrand.

    The tolerance is relative to the integral's magnitude with an absolute
    floor of ``tol`` for near-zero integrals.  Handles b < a by orientation.
    """
    if a == b:
        return np.zeros_like(np.asarray(f(a), float))
    sign = 1.0
    if b < a:
        a, b = b, a
        sign = -1.0
    fa = np.asarray(f(a), float)
    m = 0.5 * (a + b)
    fm = np.asarray(f(m), float)
    fb = np.asarray(f(b), float)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    result = _simpson_recurse(f, a, b, fa, fm, fb, whole, tol, 48)
    return sign * result


def _simpson_recurse(f, a, b, fa, fm, fb, whole, tol, depth):
    m = 0.5 * (a + b)
    lm = 0.5 * (a + m)
    rm = 0.5 * (m + b)
    flm = np.asarray(f(lm), float)
    frm = np.asarray(f(rm), float)
    left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
    right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
    err = left + right - whole
    scale = max(1e-300, float(np.max(np.abs(left + right))), tol)
    if depth <= 0 or float(np.max(np.abs(err))) <= 15.0 * tol * max(1.0, scale):
        return left + right + err / 15.0
    return (_simpson_recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + _simpson_recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1))


# ---------------------------------------------------------------------------
# tangent frames

@dataclass(frozen=True)
class TangentFrame:
    """Euclidean-orthonormal frame of the sphere tangent space at a point."""

    x: np.ndarray
    radial: np.ndarray          # x/|x|
    basis: np.ndarray           # (n, n-1), columns orthogonal to x and each other

    def check(self, tol=1e-12):
        n = self.x.shape[0]
        assert self.basis.shape == (n, n - 1)
        assert np.max(np.abs(self.basis.T @ self.radial)) <= tol
        gram = self.basis.T @ self.basis
        assert np.max(np.abs(gram - np.eye(n - 1))) <= tol


def tangent_frame(x) -> TangentFrame:
    """Householder completion of x/|x| to an orthonormal basis of R^n."""
    x = np.asarray(x, float)
    r = float(np.linalg.norm(x))
    if r <= _TINY_R:
        raise DomainError("tangent frame undefined at the origin")
    u = x / r
    n = x.shape[0]
    sign = 1.0 if u[0] >= 0 else -1.0
    v = u.copy()
    v[0] += sign
    h = np.eye(n) - 2.0 * np.outer(v, v) / float(v @ v)
    # column 0 of h is -sign*u; the rest span the orthogonal complement
    return TangentFrame(x=x, radial=u, basis=h[:, 1:])


# ---------------------------------------------------------------------------
# the metric field type

_FAMILIES = ("euclidean", "radial_power", "radial_exp", "cylinder",
             "prop21_general", "prop22_exterior", "tabulated")


@dataclass
class MetricField:
    """Evaluable metric on R^n of the form W + tangential block, W = x(x^T)/|x|^2.

    Instances are immutable after construction apart from the internal ray
    quadrature cache, which is append-only and safe for concurrent readers.
    """

    dim: int
    r_c: float
    family: str
    params: dict
    alpha: Callable                      # declared tangential lower bound alpha(r, u)
    rho_c: float = 1.0
    exterior_only: bool = False
    domain_min_r: float = 0.0
    tang: Optional[Callable] = None      # isotropic tangential profile f(r)
    dtang: Optional[Callable] = None     # f'(r)
    tang_pair: Optional[Callable] = None  # fused (f, f') for hot loops
    g_func: Optional[Callable] = None    # raw G(x) for the tabulated family
    q: Optional[Callable] = None         # forcing q(r, u): scalar or (n-1, n-1)
    q_is_matrix: bool = False
    p_boundary: object = None            # scalar or callable u -> (n-1, n-1)
    _ray_cache: dict = field(default_factory=dict, repr=False)

    @property
    def isotropic(self) -> bool:
        return self.tang is not None

    def radially_normalized(self) -> bool:
        return self.g_func is None

    def check_domain(self, r: float):
        if self.exterior_only and r < self.r_c - 1e-12 * max(1.0, self.r_c):
            raise DomainError(
                f"|x|={r:.6g} below inner radius r_c={self.r_c:.6g} of exterior-only family")
        if r < self.domain_min_r:
            raise DomainError(f"|x|={r:.6g} below domain limit {self.domain_min_r:.6g}")

    def profile(self, r):
        """Tangential factor f and derivative f' at radii r (isotropic families)."""
        if not self.isotropic:
            raise ParameterError("metric has no isotropic tangential profile")
        r = np.asarray(r, float)
        if self.tang_pair is not None:
            return self.tang_pair(r)
        return self.tang(r), self.dtang(r)

    def to_spec(self) -> dict:
        spec = {"dim": self.dim, "family": self.family, "r_c": self.r_c,
                "params": dict(self.params)}
        if isinstance(self.alpha, PowerAlpha):
            spec["alpha"] = {"kind": "power", "coef": self.alpha.coef,
                             "exponent": self.alpha.exponent}
        elif isinstance(self.alpha, ShiftedPowerAlpha):
            spec["alpha"] = {"kind": "shifted_power", "coef": self.alpha.coef,
                             "exponent": self.alpha.exponent}
        if isinstance(self.q, ScalarProfileQ):
            spec["q_field"] = {"kind": "scalar_profile", "coef": self.q.coef,
                               "exponent": self.q.exponent}
        return spec


# ---------------------------------------------------------------------------
# built-in families

def euclidean_metric(dim=2, r_c=1.0) -> MetricField:
    """Flat metric, G = I everywhere."""
    one = lambda r: np.ones_like(np.asarray(r, float))
    zero = lambda r: np.zeros_like(np.asarray(r, float))
    return MetricField(dim=dim, r_c=r_c, family="euclidean", params={},
                       alpha=PowerAlpha(0.0, 0.0), tang=one, dtang=zero)


def radial_power_metric(dim=2, m1=2.0, r_c=1.0) -> MetricField:
    """Tangential factor (r/r_c)^(2(m1-1)) outside r_c, identity inside."""
    p = 2.0 * (m1 - 1.0)
    edge = r_c * (1.0 - 1e-12)      # junction guard against norm roundoff

    def f(r):
        r = np.asarray(r, float)
        return np.where(r >= edge, (np.maximum(r, _TINY_R) / r_c) ** p, 1.0)

    def fp(r):
        r = np.asarray(r, float)
        safe = np.maximum(r, _TINY_R)
        return np.where(r >= edge, (p / r_c) * (safe / r_c) ** (p - 1.0), 0.0)

    return MetricField(dim=dim, r_c=r_c, family="radial_power", params={"m1": m1},
                       alpha=PowerAlpha(m1 - 1.0, -1.0), tang=f, dtang=fp)


def radial_exp_metric(dim=2, m1=2.0, m2=3.0, s1=2.0, s2=1.0, r_c=1.0) -> MetricField:
    """Exterior family with det G matching eta0 * r^(-2(n-1)) * exp(2 m2 int y^-s2 dy).

    The tangential factor is (r/r_c)^-2 * exp(2 m2 J(r)/(n-1)) with
    J(r) = int_{r_c}^r y^-s2 dy, so the distance Laplacian equals m2 r^-s2.
    The declared lower bound is alpha(r) = m1 r^-s1 - 1/r.
    """
    nm1 = dim - 1

    def J(r):
        r = np.asarray(r, float)
        if abs(s2 - 1.0) < 1e-14:
            return np.log(r / r_c)
        return (r ** (1.0 - s2) - r_c ** (1.0 - s2)) / (1.0 - s2)

    def f(r):
        r = np.asarray(r, float)
        return (r / r_c) ** (-2.0) * np.exp(2.0 * m2 * J(r) / nm1)

    def fp(r):
        r = np.asarray(r, float)
        return f(r) * (-2.0 / r + 2.0 * m2 * r ** (-s2) / nm1)

    return MetricField(dim=dim, r_c=r_c, family="radial_exp",
                       params={"m1": m1, "m2": m2, "s1": s1, "s2": s2},
                       alpha=ShiftedPowerAlpha(m1, -s1),
                       exterior_only=True, domain_min_r=0.0,
                       tang=f, dtang=fp)


def cylinder_metric(dim=2, R0=2.0, r_c=None) -> MetricField:
    """Tangential factor (R0/r)^2: every sphere is totally geodesic (trapping)."""
    r_c = R0 if r_c is None else r_c

    def f(r):
        r = np.maximum(np.asarray(r, float), _TINY_R)
        return (R0 / r) ** 2

    def fp(r):
        r = np.maximum(np.asarray(r, float), _TINY_R)
        return -2.0 * R0 ** 2 / r ** 3

    return MetricField(dim=dim, r_c=r_c, family="cylinder", params={"R0": R0},
                       alpha=PowerAlpha(-1.0, -1.0), domain_min_r=1e-9,
                       tang=f, dtang=fp)


def tabulated_metric(g_func, dim, r_c, alpha, rho_c=None, exterior_only=False) -> MetricField:
    """Wrap an arbitrary pointwise metric; derivatives use central differences."""
    m = MetricField(dim=dim, r_c=r_c, family="tabulated", params={},
                    alpha=alpha, exterior_only=exterior_only,
                    domain_min_r=r_c if exterior_only else 0.0, g_func=g_func)
    if rho_c is not None:
        m.rho_c = rho_c
    return m


def make_metric(family, dim=2, r_c=1.0, **params) -> MetricField:
    if family == "euclidean":
        return euclidean_metric(dim=dim, r_c=r_c)
    if family == "radial_power":
        return radial_power_metric(dim=dim, r_c=r_c, **params)
    if family == "radial_exp":
        return radial_exp_metric(dim=dim, r_c=r_c, **params)
    if family == "cylinder":
        return cylinder_metric(dim=dim, **params)
    raise ParameterError(f"unknown or non-constructible family {family!r}")


def metric_from_spec(spec: dict) -> MetricField:
    """Build a metric from its JSON-style description."""
    family = spec["family"]
    dim = int(spec.get("dim", 2))
    r_c = float(spec.get("r_c", 1.0))
    params = {k: float(v) for k, v in spec.get("params", {}).items()}
    if family in ("euclidean", "radial_power", "radial_exp", "cylinder"):
        m = make_metric(family, dim=dim, r_c=r_c, **params)
    elif family == "prop21_general":
        alpha = alpha_from_spec(spec["alpha"])
        q = q_from_spec(spec.get("q_field", {"kind": "zero"}))
        m = build_escape_metric(alpha, q=q, r_c=r_c, dim=dim)
    elif family == "prop22_exterior":
        alpha = alpha_from_spec(spec["alpha"])
        q = q_from_spec(spec.get("q_field", {"kind": "zero"}))
        pb = spec.get("p_boundary", {"kind": "identity"})
        if pb.get("kind") == "identity":
            p0 = 1.0
        elif pb.get("kind") == "scalar":
            p0 = float(pb["value"])
        else:
            raise ParameterError(f"unknown p_boundary kind {pb.get('kind')!r}")
        m = build_exterior_escape_metric(alpha, q=q, p_boundary=p0, r_c=r_c, dim=dim)
    else:
        raise ParameterError(f"family {family!r} not expressible in a spec file")
    if "alpha" in spec and family in ("euclidean", "radial_power", "radial_exp", "cylinder"):
        m.alpha = alpha_from_spec(spec["alpha"])
    return m


# ---------------------------------------------------------------------------
# ray-integral constructors

def _validate_alpha(alpha, r_c, r_hi=None, n=256):
    """alpha must stay strictly above -1/r on the sampling range."""
    r_hi = r_hi if r_hi is not None else 100.0 * r_c
    rs = np.geomspace(r_c, r_hi, n)
    vals = np.asarray(alpha(rs)) if _is_radial_profile(alpha) else \
        np.array([alpha(r, None) for r in rs], float)
    slack = vals + 1.0 / rs
    if np.min(slack) <= 0.0:
        bad = rs[int(np.argmin(slack))]
        raise ParameterError(
            f"alpha violates alpha > -1/r near r={bad:.6g} (slack {np.min(slack):.3g})")


def _is_radial_profile(fn) -> bool:
    return isinstance(fn, (PowerAlpha, ShiftedPowerAlpha, ScalarProfileQ))


def _ray_key(metric, u):
    """Cache key for the ray through direction u; radial data shares one ray."""
    if _is_radial_profile(metric.alpha) and (metric.q is None or _is_radial_profile(metric.q)):
        return None
    return tuple(np.round(u, 12))


def _log_integral(metric, r, u):
    """A(r) = int_{r_c}^r 2 alpha(y) dy along the ray, memoized per (ray, r)."""
    key = ("A", _ray_key(metric, u), float(r))
    cache = metric._ray_cache
    if key not in cache:
        cache[key] = float(adaptive_simpson(
            lambda y: 2.0 * float(metric.alpha(y, u)), metric.r_c, float(r)))
    return cache[key]


def _q_integral(metric, r, u):
    """int_{r_c}^r 2 exp(-A(y)) Q(y) dy along the ray (scalar or matrix), memoized."""
    key = ("Q", _ray_key(metric, u), float(r))
    cache = metric._ray_cache
    if key not in cache:
        if metric.q is None:
            cache[key] = 0.0
        else:
            def integrand(y):
                return 2.0 * math.exp(-_log_integral(metric, y, u)) * np.asarray(
                    metric.q(y, u), float)
            cache[key] = adaptive_simpson(integrand, metric.r_c, float(r))
    return cache[key]


def _constructed_profile(metric):
    """Isotropic f(r), f'(r) closures for a ray-constructed metric with scalar data."""
    r_c = metric.r_c
    edge = r_c * (1.0 - 1e-12)
    p0 = metric.p_boundary if metric.p_boundary is not None else 1.0
    interior_identity = not metric.exterior_only

    def f_scalar(r):
        r = float(r)
        if interior_identity and r < edge:
            return 1.0
        a = _log_integral(metric, r, None)
        qint = _q_integral(metric, r, None)
        return math.exp(a) * (p0 + float(qint))

    def fp_scalar(r):
        r = float(r)
        if interior_identity and r < edge:
            return 0.0
        qv = float(metric.q(r, None)) if metric.q is not None else 0.0
        return 2.0 * float(metric.alpha(r, None)) * f_scalar(r) + 2.0 * qv

    f = np.vectorize(f_scalar, otypes=[float])
    fp = np.vectorize(fp_scalar, otypes=[float])
    return f, fp


def build_escape_metric(alpha, q=None, r_c=1.0, dim=2, validate_r_hi=None) -> MetricField:
    """Assemble a full-space metric from (alpha, Q): identity inside r_c, the
    exponential ray integral of 2*alpha times the boundary tangential block plus
    the accumulated forcing outside.  The result certifies against its own alpha.
    """
    _validate_alpha(alpha, r_c, validate_r_hi)
    q_is_matrix = q is not None and np.ndim(q(r_c, None)) == 2
    m = MetricField(dim=dim, r_c=r_c, family="prop21_general", params={},
                    alpha=alpha, rho_c=1.0, q=q, q_is_matrix=q_is_matrix,
                    p_boundary=1.0)
    if not q_is_matrix:
        m.tang, m.dtang = _constructed_profile(m)
    return m


def build_exterior_escape_metric(alpha, q=None, p_boundary=None, r_c=1.0, dim=2,
                                 validate_r_hi=None) -> MetricField:
    """As build_escape_metric but defined only outside r_c, with boundary block P."""
    _validate_alpha(alpha, r_c, validate_r_hi)
    q_is_matrix = q is not None and np.ndim(q(r_c, None)) == 2
    p_is_matrix = callable(p_boundary)
    p0 = 1.0 if p_boundary is None else p_boundary
    if not p_is_matrix and float(p0) <= 0.0:
        raise ParameterError("boundary block P must be positive definite")
    m = MetricField(dim=dim, r_c=r_c, family="prop22_exterior", params={},
                    alpha=alpha, exterior_only=True, domain_min_r=0.0,
                    q=q, q_is_matrix=q_is_matrix, p_boundary=p0)
    if not (q_is_matrix or p_is_matrix):
        m.tang, m.dtang = _constructed_profile(m)
    return m


# ---------------------------------------------------------------------------
# pointwise evaluation

def evaluate_G(metric: MetricField, x, check_domain=True) -> np.ndarray:
    """Metric matrix G(x); symmetric positive definite or an error."""
    x = np.asarray(x, float)
    r = float(np.linalg.norm(x))
    if check_domain:
        metric.check_domain(r)
    n = metric.dim
    if metric.g_func is not None:
        g = np.asarray(metric.g_func(x), float)
        g = 0.5 * (g + g.T)
        if np.min(scipy.linalg.eigvalsh(g)) <= 0.0:
            raise NonPositiveDefiniteError(x)
        return g
    if r <= _TINY_R:
        if metric.exterior_only:
            raise DomainError("exterior family undefined at the origin")
        return np.eye(n)
    u = x / r
    if metric.isotropic:
        f = float(metric.tang(r))
        if f <= 0.0:
            raise NonPositiveDefiniteError(x, f"tangential factor {f:.3g} <= 0")
        return f * np.eye(n) + (1.0 - f) * np.outer(u, u)
    return _evaluate_constructed_general(metric, r, u)


def _evaluate_constructed_general(metric, r, u):
    """Ray-constructed metric with matrix-valued P or Q, assembled in the
    deterministic Householder tangent frame at the ray direction."""
    n = metric.dim
    if (not metric.exterior_only) and r < metric.r_c * (1.0 - 1e-12):
        return np.eye(n)
    fr = tangent_frame(u).basis
    w = np.outer(u, u)
    a = _log_integral(metric, r, u)
    if callable(metric.p_boundary):
        p = np.asarray(metric.p_boundary(u), float)
    else:
        p = float(metric.p_boundary) * np.eye(n - 1)
    block = math.exp(a) * p
    if metric.q is not None:
        qint = np.asarray(_q_integral(metric, r, u), float)
        if qint.ndim == 0:
            qint = float(qint) * np.eye(n - 1)
        block = block + math.exp(a) * qint
    g = w + fr @ block @ fr.T
    g = 0.5 * (g + g.T)
    if np.min(scipy.linalg.eigvalsh(g)) <= 0.0:
        raise NonPositiveDefiniteError(r * u)
    return g


def evaluate_dG_dr(metric: MetricField, x) -> np.ndarray:
    """Radial derivative of G at x; only defined outside r_c."""
    x = np.asarray(x, float)
    r = float(np.linalg.norm(x))
    if r < metric.r_c - 1e-12 * max(1.0, metric.r_c):
        raise DomainError(f"dG/dr requested inside r_c ({r:.6g} < {metric.r_c:.6g})")
    metric.check_domain(r)
    n = metric.dim
    u = x / r
    if metric.isotropic:
        fp = float(metric.dtang(r))
        return fp * (np.eye(n) - np.outer(u, u))
    if metric.g_func is not None:
        h = FD_STEP_SCALE * max(1.0, r)
        gp = evaluate_G(metric, x + h * u, check_domain=False)
        gm = evaluate_G(metric, x - h * u, check_domain=False)
        return (gp - gm) / (2.0 * h)
    # constructed metric with matrix data: d/dr G = 2 (alpha G + Q) (I - W)
    g = evaluate_G(metric, x)
    w = np.outer(u, u)
    dg = 2.0 * float(metric.alpha(r, u)) * (g @ (np.eye(n) - w))
    if metric.q is not None:
        fr = tangent_frame(u).basis
        qv = np.asarray(metric.q(r, u), float)
        if qv.ndim == 0:
            qemb = float(qv) * (np.eye(n) - w)
        else:
            qemb = fr @ qv @ fr.T
        dg = dg + 2.0 * qemb
    return 0.5 * (dg + dg.T)


def _dG_components(metric, x):
    """Array dG[l, i, j] = d g_ij / d x_l."""
    x = np.asarray(x, float)
    n = metric.dim
    r = float(np.linalg.norm(x))
    if metric.isotropic:
        if r <= _TINY_R:
            return np.zeros((n, n, n))
        u = x / r
        f = float(metric.tang(r))
        fp = float(metric.dtang(r))
        eye = np.eye(n)
        uu = np.outer(u, u)
        term1 = fp * np.einsum("l,ij->lij", u, eye - uu)
        sym = (np.einsum("li,j->lij", eye, u) + np.einsum("lj,i->lij", eye, u)
               - 2.0 * np.einsum("i,j,l->lij", u, u, u))
        term2 = ((1.0 - f) / r) * sym
        return term1 + term2
    h = FD_STEP_SCALE * max(1.0, r)
    dg = np.zeros((n, n, n))
    for l in range(n):
        e = np.zeros(n)
        e[l] = h
        gp = evaluate_G(metric, x + e, check_domain=False)
        gm = evaluate_G(metric, x - e, check_domain=False)
        dg[l] = (gp - gm) / (2.0 * h)
    return dg


def christoffel(metric: MetricField, x) -> np.ndarray:
    """Christoffel symbols Gamma[k, i, j] of the metric at x."""
    x = np.asarray(x, float)
    g = evaluate_G(metric, x)
    vals = scipy.linalg.eigvalsh(g)
    if vals[0] <= 0.0:
        raise NonPositiveDefiniteError(x)
    ginv = np.linalg.inv(g)
    dg = _dG_components(metric, x)
    # Gamma^k_ij = 1/2 g^{kl} (d_i g_lj + d_j g_li - d_l g_ij)
    bracket = (np.einsum("ilj->lij", dg) + np.einsum("jli->lij", dg) - dg)
    return 0.5 * np.einsum("kl,lij->kij", ginv, bracket)


def geodesic_accel(metric: MetricField, X, V) -> np.ndarray:
    """Batched geodesic acceleration -Gamma(x)(v, v) for rows of X, V.

    Uses the closed form for isotropic families; falls back to pointwise
    Christoffel contraction otherwise.
    """
    X = np.atleast_2d(np.asarray(X, float))
    V = np.atleast_2d(np.asarray(V, float))
    if metric.isotropic:
        r = np.linalg.norm(X, axis=1)
        safe_r = np.maximum(r, _TINY_R)
        u = X / safe_r[:, None]
        s = np.einsum("bi,bi->b", u, V)
        w = V - s[:, None] * u
        f, fp = metric.profile(safe_r)
        w2 = np.einsum("bi,bi->b", w, w)
        rad = (-0.5 * fp + (1.0 - f) / safe_r) * w2
        tan = fp * s / f
        acc = -(rad[:, None] * u + tan[:, None] * w)
        acc[r <= _TINY_R] = 0.0
        return acc
    out = np.empty_like(V)
    for b in range(X.shape[0]):
        gamma = christoffel(metric, X[b])
        out[b] = -np.einsum("kij,i,j->k", gamma, V[b], V[b])
    return out


# ---------------------------------------------------------------------------
# Hessian and Laplacian of the distance function

def _coordinate_hessian_r(metric, x):
    """Coordinate Hessian of r: H_ij = d_i d_j r - Gamma^k_ij d_k r."""
    x = np.asarray(x, float)
    r = float(np.linalg.norm(x))
    u = x / r
    n = metric.dim
    gamma = christoffel(metric, x)
    return (np.eye(n) - np.outer(u, u)) / r - np.einsum("kij,k->ij", gamma, u)


def hessian_r(metric: MetricField, x, X, check=True) -> float:
    """Second fundamental form D^2 r(X, X) for a sphere-tangent vector X.

    Returns the closed-form value <(dG/dr/2) X, X> + |X|_g^2 / r and, when
    check is on, verifies it against the Christoffel-based Hessian to 1e-6
    relative as a standing self-test.
    """
    x = np.asarray(x, float)
    X = np.asarray(X, float)
    r = float(np.linalg.norm(x))
    if r < metric.r_c - 1e-12 * max(1.0, metric.r_c):
        raise DomainError("hessian_r defined for |x| >= r_c")
    u = x / r
    if abs(float(u @ X)) > 1e-9 * max(1.0, float(np.linalg.norm(X))):
        raise NotTangentError(f"<X, x/|x|> = {float(u @ X):.3g}")
    g = evaluate_G(metric, x)
    dg = evaluate_dG_dr(metric, x)
    xg2 = float(X @ g @ X)
    closed = 0.5 * float(X @ dg @ X) + xg2 / r
    if check:
        h = _coordinate_hessian_r(metric, x)
        via_gamma = float(X @ h @ X)
        scale = max(abs(closed), xg2 / r, 1e-12)
        if abs(closed - via_gamma) > 1e-6 * scale:
            raise FormulaMismatchError(
                f"hessian_r mismatch at |x|={r:.6g}: {closed:.12g} vs {via_gamma:.12g}")
    return closed


def laplacian_r(metric: MetricField, x, check=True) -> float:
    """Distance Laplacian (n-1)/r + d/dr log sqrt(det G) at x, |x| >= r_c."""
    x = np.asarray(x, float)
    r = float(np.linalg.norm(x))
    if r < metric.r_c - 1e-12 * max(1.0, metric.r_c):
        raise DomainError("laplacian_r defined for |x| >= r_c")
    metric.check_domain(r)
    n = metric.dim
    if metric.isotropic:
        f, fp = (float(v) for v in metric.profile(r))
        closed = (n - 1) * (1.0 / r + 0.5 * fp / f)
    else:
        h = FD_STEP_SCALE * max(1.0, r)
        u = x / r
        ldp = np.linalg.slogdet(evaluate_G(metric, x + h * u, check_domain=False))[1]
        ldm = np.linalg.slogdet(evaluate_G(metric, x - h * u, check_domain=False))[1]
        closed = (n - 1) / r + 0.25 * (ldp - ldm) / h
    if check:
        via_gamma = _laplacian_r_christoffel(metric, x)
        scale = max(abs(closed), (n - 1) / r, 1e-12)
        if abs(closed - via_gamma) > 1e-6 * scale:
            raise FormulaMismatchError(
                f"laplacian_r mismatch at |x|={r:.6g}: {closed:.12g} vs {via_gamma:.12g}")
    return closed


def _laplacian_r_christoffel(metric, x) -> float:
    """Trace of the Christoffel-based Hessian over a g-orthonormal tangent frame."""
    x = np.asarray(x, float)
    frame = tangent_frame(x)
    g = evaluate_G(metric, x)
    t = frame.basis.T @ g @ frame.basis
    l = np.linalg.cholesky(t)
    e = frame.basis @ np.linalg.inv(l).T        # columns g-orthonormal, tangent
    h = _coordinate_hessian_r(metric, x)
    return float(np.einsum("ia,ij,ja->", e, h, e))


# ---------------------------------------------------------------------------
# certification

@dataclass
class SampleSpec:
    """Sampling grid for certification: radial range times directions."""

    r_lo: float
    r_hi: float
    n_r: int = 64
    n_theta: int = 32
    seed: int = 0

    def directions(self, dim) -> np.ndarray:
        if dim == 2:
            th = np.linspace(0.0, 2.0 * np.pi, self.n_theta, endpoint=False)
            return np.stack([np.cos(th), np.sin(th)], axis=1)
        rng = np.random.default_rng(self.seed)
        d = rng.standard_normal((self.n_theta, dim))
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass
class CertificationReport:
    """Per-point escape margins with a global verdict."""

    verdict: bool
    tol: float
    worst_margin: float
    worst_point: np.ndarray
    min_alpha_slack: float          # min of alpha + 1/r over exterior samples
    rows: np.ndarray                # columns: r, theta_index, margin_escape, margin_interior
    notes: tuple = ()

    def write_csv(self, path, meta=()):
        with open(path, "w") as fh:
            for line in meta:
                fh.write(f"# {line}\n")
            fh.write(f"# verdict={'pass' if self.verdict else 'fail'}"
                     f" worst_margin={self.worst_margin!r}"
                     f" min_alpha_slack={self.min_alpha_slack!r}\n")
            for note in self.notes:
                fh.write(f"# note: {note}\n")
            fh.write("r,theta_index,margin_escape,margin_interior\n")
            for r, j, me, mi in self.rows:
                fh.write(f"{r!r},{int(j)},{me!r},{mi!r}\n")


def certify_escape(metric: MetricField, sample: SampleSpec, tol=CERT_TOL,
                   alpha=None) -> CertificationReport:
    """Check the escape inequalities on a sample grid.

    Outside r_c the tangential lower bound is certified through the
    generalized eigenproblem B v = lambda T v with B and T the half radial
    derivative and the metric restricted to a Euclidean-orthonormal tangent
    frame; the margin is lambda_min - alpha.  Inside r_c (full-space metrics)
    the convexity of r^2 is checked the same way.  An inequality failure is a
    report outcome, not an error.
    """
    alpha = alpha if alpha is not None else metric.alpha
    if metric.exterior_only and sample.r_lo < metric.r_c - 1e-12:
        raise DomainError("sample range extends inside an exterior-only family")
    radii = np.linspace(sample.r_lo, sample.r_hi, sample.n_r)
    dirs = sample.directions(metric.dim)
    rows = []
    worst = np.inf
    worst_point = None
    min_slack = np.inf
    for r in radii:
        interior = r < metric.r_c - 1e-12
        for j, u in enumerate(dirs):
            x = r * u
            if interior:
                me = np.nan
                mi = _interior_margin(metric, x)
                margin = mi
            else:
                frame = tangent_frame(x)
                g = evaluate_G(metric, x)
                dg = evaluate_dG_dr(metric, x)
                b = frame.basis.T @ (0.5 * dg) @ frame.basis
                t = frame.basis.T @ g @ frame.basis
                lam = scipy.linalg.eigh(b, t, eigvals_only=True)
                a_val = float(alpha(r, u))
                me = float(lam[0]) - a_val
                mi = np.nan
                margin = me
                min_slack = min(min_slack, a_val + 1.0 / r)
            rows.append((r, j, me, mi))
            if margin < worst:
                worst = margin
                worst_point = x
    notes = []
    if (not metric.exterior_only) and metric.family not in ("euclidean", "cylinder"):
        notes.append("tangential profile is C0 at r_c; derivative-based checks "
                     "are one-sided at the junction")
    return CertificationReport(
        verdict=bool(worst >= -tol), tol=tol, worst_margin=float(worst),
        worst_point=worst_point, min_alpha_slack=float(min_slack),
        rows=np.array(rows, float), notes=tuple(notes))


def _interior_margin(metric, x) -> float:
    """Margin of D^2(r^2) >= 2 rho_c |X|_g^2 at an interior point."""
    x = np.asarray(x, float)
    r = float(np.linalg.norm(x))
    n = metric.dim
    g = evaluate_G(metric, x)
    if r <= 1e-8:
        # identity-core families: D^2 r^2 = 2 I exactly at the origin
        m = 2.0 * np.eye(n)
    else:
        u = x / r
        h = _coordinate_hessian_r(metric, x)
        m = 2.0 * np.outer(u, u) + 2.0 * r * h
    lam = scipy.linalg.eigh(0.5 * (m + m.T), g, eigvals_only=True)
    return 0.5 * float(lam[0]) - metric.rho_c


def estimate_rho_c(metric: MetricField, n_r=16, n_theta=16, seed=0) -> float:
    """Estimate the interior convexity constant as half the worst sampled
    eigenvalue of D^2(r^2) against 2|X|_g^2 inside r_c."""
    radii = np.linspace(0.05 * metric.r_c, 0.999 * metric.r_c, n_r)
    dirs = SampleSpec(0, 0, n_theta=n_theta, seed=seed).directions(metric.dim)
    best = np.inf
    for r in radii:
        for u in dirs:
            x = r * u
            g = evaluate_G(metric, x)
            h = _coordinate_hessian_r(metric, x)
            m = 2.0 * np.outer(u, u) + 2.0 * r * h
            lam = scipy.linalg.eigh(0.5 * (m + m.T), g, eigvals_only=True)
            best = min(best, 0.5 * float(lam[0]))
    return 0.5 * best
