"""Unit-speed geodesic integration and escape diagnostics.

Geodesics are integrated with fixed-step classical RK4 on the first-order
system (x' = v, v' = -Gamma(x)(v, v)).  Traces carry the radius |gamma(t)|,
the radial velocity component h(t) = <d/dr, gamma'(t)>_g and the unit-speed
drift, which together drive the escape-bound checks: the linear velocity
bound, the integral lower bound with its crossing-time construction, the
exterior escape/boundary dichotomy, and sphere trapping.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import DomainError, InapplicableTheoremError
from .metrics import MetricField, SampleSpec, evaluate_G, geodesic_accel, _TINY_R

DEFAULT_DT = 1e-3
EVENT_TOL = 1e-8          # bisection tolerance (in t) for boundary events
H_CROSSING_TOL = 1e-9     # slack when locating the persistent h >= 0 regime


# ---------------------------------------------------------------------------
# states and traces

@dataclass
class GeodesicState:
    t: float
    x: np.ndarray
    v: np.ndarray


@dataclass
class GeodesicTrace:
    """Sampled geodesic with escape diagnostics."""

    t: np.ndarray
    r: np.ndarray
    h: np.ndarray
    drift: np.ndarray
    x0: np.ndarray
    dt: float
    x: Optional[np.ndarray] = None      # (N, n) positions when recorded
    v: Optional[np.ndarray] = None
    method: str = "rk4"
    record_every: int = 1
    reflections: tuple = ()
    exited: bool = False
    exit_time: Optional[float] = None

    @property
    def T(self) -> float:
        return float(self.t[-1])

    @property
    def final_r(self) -> float:
        return float(self.r[-1])

    @property
    def asymptotic_speed(self) -> float:
        return self.final_r / self.T if self.T > 0 else 0.0

    @property
    def max_drift(self) -> float:
        return float(np.max(self.drift))


# ---------------------------------------------------------------------------
# velocity helpers

def g_speed_squared(metric: MetricField, X, V) -> np.ndarray:
    """|v|_g^2 row-wise; closed form for isotropic families."""
    X = np.atleast_2d(np.asarray(X, float))
    V = np.atleast_2d(np.asarray(V, float))
    if metric.isotropic:
        r = np.linalg.norm(X, axis=1)
        safe = np.maximum(r, _TINY_R)
        u = X / safe[:, None]
        s = np.einsum("bi,bi->b", u, V)
        w = V - s[:, None] * u
        f, _ = metric.profile(safe)
        out = s ** 2 + f * np.einsum("bi,bi->b", w, w)
        v2 = np.einsum("bi,bi->b", V, V)
        return np.where(r <= _TINY_R, v2, out)
    out = np.empty(X.shape[0])
    for b in range(X.shape[0]):
        g = evaluate_G(metric, X[b], check_domain=False)
        out[b] = float(V[b] @ g @ V[b])
    return out


def h_values(metric: MetricField, X, V) -> np.ndarray:
    """Radial velocity component <d/dr, v>_g row-wise (zero at the origin)."""
    X = np.atleast_2d(np.asarray(X, float))
    V = np.atleast_2d(np.asarray(V, float))
    r = np.linalg.norm(X, axis=1)
    safe = np.maximum(r, _TINY_R)
    u = X / safe[:, None]
    if metric.radially_normalized():
        h = np.einsum("bi,bi->b", u, V)
    else:
        h = np.empty(X.shape[0])
        for b in range(X.shape[0]):
            g = evaluate_G(metric, X[b], check_domain=False)
            h[b] = float(u[b] @ g @ V[b])
    return np.where(r <= _TINY_R, 0.0, h)


def unit_speed_velocity(metric: MetricField, x, direction) -> np.ndarray:
    """Rescale a direction to unit g-speed at x."""
    d = np.asarray(direction, float)
    speed = float(np.sqrt(g_speed_squared(metric, x, d)[0]))
    if speed <= 0.0:
        raise ValueError("zero direction")
    return d / speed


def geodesic_rhs(metric: MetricField, state: GeodesicState):
    """Right-hand side (dx/dt, dv/dt) of the geodesic system at a state."""
    acc = geodesic_accel(metric, state.x[None], state.v[None])[0]
    return state.v.copy(), acc


# ---------------------------------------------------------------------------
# RK4 stepping

def _rk4_step(metric, X, V, dt):
    a1 = geodesic_accel(metric, X, V)
    x2 = X + 0.5 * dt * V
    v2 = V + 0.5 * dt * a1
    a2 = geodesic_accel(metric, x2, v2)
    x3 = X + 0.5 * dt * v2
    v3 = V + 0.5 * dt * a2
    a3 = geodesic_accel(metric, x3, v3)
    x4 = X + dt * v3
    v4 = V + dt * a3
    a4 = geodesic_accel(metric, x4, v4)
    xn = X + dt / 6.0 * (V + 2.0 * v2 + 2.0 * v3 + v4)
    vn = V + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
    return xn, vn


def _domain_floor(metric) -> float:
    return metric.r_c if metric.exterior_only else metric.domain_min_r


def _bisect_crossing(metric, x, v, dt, target_r):
    """Locate the first time in (0, dt] where |x(t)| = target_r, to EVENT_TOL."""
    lo, hi = 0.0, dt
    x_lo, v_lo = x, v
    while hi - lo > EVENT_TOL:
        mid = 0.5 * (lo + hi)
        xm, vm = _rk4_step(metric, x[None], v[None], mid)
        if float(np.linalg.norm(xm[0])) >= target_r:
            lo, x_lo, v_lo = mid, xm[0], vm[0]
        else:
            hi = mid
    return lo, x_lo, v_lo


def reflect_at_inner_boundary(metric: MetricField, state: GeodesicState) -> GeodesicState:
    """Specular reflection at |x| = r_c: flip the radial velocity component.

    Preserves the tangential part and the g-speed exactly (the decomposition
    v = h d/dr + v_tan is g-orthogonal under radial normalization).
    """
    r = float(np.linalg.norm(state.x))
    u = state.x / r
    h = float(h_values(metric, state.x, state.v)[0])
    v_new = state.v - 2.0 * h * u
    return GeodesicState(t=state.t, x=state.x.copy(), v=v_new)


# ---------------------------------------------------------------------------
# single-trajectory integration with boundary events

def integrate_geodesic(metric: MetricField, x0, v0_direction, T, dt=DEFAULT_DT,
                       reflect=False, record_every=1, renormalize=False) -> GeodesicTrace:
    """Integrate a unit-speed geodesic to time T with fixed step dt.

    Crossing the metric's inner domain limit either reflects the trajectory
    (reflect=True, exterior metrics) or ends the trace with exited=True; the
    crossing time is located by bisection.  Per-step renormalization of the
    velocity is off by default so the speed drift stays an honest diagnostic.
    """
    x = np.asarray(x0, float)
    v = unit_speed_velocity(metric, x, v0_direction)
    n = x.shape[0]
    n_steps = int(round(T / dt))
    floor = _domain_floor(metric)
    guarded = metric.exterior_only or metric.domain_min_r > 0.0

    cap = n_steps // record_every + 3
    ts = np.empty(cap)
    xs = np.empty((cap, n))
    vs = np.empty((cap, n))
    idx = 0

    def record(t, xx, vv):
        nonlocal idx
        ts[idx] = t
        xs[idx] = xx
        vs[idx] = vv
        idx += 1

    record(0.0, x, v)
    reflections = []
    exited = False
    exit_time = None
    t = 0.0
    for k in range(1, n_steps + 1):
        xn, vn = _rk4_step(metric, x[None], v[None], dt)
        xn, vn = xn[0], vn[0]
        if guarded and float(np.linalg.norm(xn)) < floor:
            tau, xb, vb = _bisect_crossing(metric, x, v, dt, floor)
            if reflect and metric.exterior_only:
                state = reflect_at_inner_boundary(metric, GeodesicState(t + tau, xb, vb))
                reflections.append(t + tau)
                rem = dt - tau
                xn, vn = _rk4_step(metric, state.x[None], state.v[None], rem)
                xn, vn = xn[0], vn[0]
            else:
                record(t + tau, xb, vb)
                exited = True
                exit_time = t + tau
                break
        x, v = xn, vn
        t = k * dt
        if renormalize:
            v = v / float(np.sqrt(g_speed_squared(metric, x, v)[0]))
        if k % record_every == 0:
            record(t, x, v)
    ts, xs, vs = ts[:idx], xs[:idx], vs[:idx]
    r = np.linalg.norm(xs, axis=1)
    h = h_values(metric, xs, vs)
    drift = np.abs(g_speed_squared(metric, xs, vs) - 1.0)
    return GeodesicTrace(t=ts, r=r, h=h, drift=drift, x0=np.asarray(x0, float),
                         dt=dt, x=xs, v=vs, record_every=record_every,
                         reflections=tuple(reflections), exited=exited,
                         exit_time=exit_time)


# ---------------------------------------------------------------------------
# batched integration (no reflection; exits freeze the trajectory)

@dataclass
class BatchTraces:
    t: np.ndarray                # (N,)
    r: np.ndarray                # (B, N)
    h: np.ndarray                # (B, N)
    drift: np.ndarray            # (B, N)
    x0: np.ndarray               # (B, n)
    v0: np.ndarray
    final_x: np.ndarray
    final_v: np.ndarray
    exited: np.ndarray           # (B,) bool
    exit_time: np.ndarray        # (B,) nan when not exited
    dt: float
    record_every: int

    def trace(self, b: int) -> GeodesicTrace:
        sel = self.t <= (self.exit_time[b] if self.exited[b] else np.inf)
        return GeodesicTrace(t=self.t[sel], r=self.r[b, sel], h=self.h[b, sel],
                             drift=self.drift[b, sel], x0=self.x0[b], dt=self.dt,
                             record_every=self.record_every,
                             exited=bool(self.exited[b]),
                             exit_time=(float(self.exit_time[b])
                                        if self.exited[b] else None))


def integrate_batch(metric: MetricField, X0, directions, T, dt=DEFAULT_DT,
                    record_every=1) -> BatchTraces:
    """Integrate a batch of geodesics simultaneously.

    Trajectories that cross the inner domain limit are frozen at the last
    state inside and flagged; their exit time is refined by bisection.
    """
    X = np.atleast_2d(np.asarray(X0, float)).copy()
    D = np.atleast_2d(np.asarray(directions, float))
    B, n = X.shape
    V = D / np.sqrt(g_speed_squared(metric, X, D))[:, None]
    v0 = V.copy()
    n_steps = int(round(T / dt))
    floor = _domain_floor(metric)
    guarded = metric.exterior_only or metric.domain_min_r > 0.0

    n_rec = n_steps // record_every + 1
    ts = np.empty(n_rec)
    rr = np.empty((B, n_rec))
    hh = np.empty((B, n_rec))
    dd = np.empty((B, n_rec))
    exited = np.zeros(B, bool)
    exit_time = np.full(B, np.nan)

    def record(j, t):
        ts[j] = t
        rr[:, j] = np.linalg.norm(X, axis=1)
        hh[:, j] = h_values(metric, X, V)
        dd[:, j] = np.abs(g_speed_squared(metric, X, V) - 1.0)

    record(0, 0.0)
    j = 1
    for k in range(1, n_steps + 1):
        active = ~exited
        if np.any(active):
            xn, vn = _rk4_step(metric, X[active], V[active], dt)
            if guarded:
                rn = np.linalg.norm(xn, axis=1)
                out = rn < floor
                if np.any(out):
                    act_idx = np.flatnonzero(active)
                    for i_local in np.flatnonzero(out):
                        b = act_idx[i_local]
                        tau, xb, vb = _bisect_crossing(metric, X[b], V[b], dt, floor)
                        xn[i_local], vn[i_local] = xb, vb
                        exited[b] = True
                        exit_time[b] = (k - 1) * dt + tau
            X[active] = xn
            V[active] = vn
        if k % record_every == 0:
            record(j, k * dt)
            j += 1
    return BatchTraces(t=ts[:j], r=rr[:, :j], h=hh[:, :j], drift=dd[:, :j],
                       x0=np.atleast_2d(np.asarray(X0, float)), v0=v0,
                       final_x=X, final_v=V, exited=exited, exit_time=exit_time,
                       dt=dt, record_every=record_every)


# ---------------------------------------------------------------------------
# escape-bound checks

def estimate_c0(metric: MetricField, n_r=24, n_theta=16, seed=0) -> float:
    """sup of r |Dr|_g over the closed ball of radius r_c."""
    if metric.exterior_only:
        raise InapplicableTheoremError("no interior ball for an exterior-only metric")
    radii = np.linspace(0.05 * metric.r_c, metric.r_c, n_r)
    dirs = SampleSpec(0, 0, n_theta=n_theta, seed=seed).directions(metric.dim)
    best = 0.0
    for r in radii:
        for u in dirs:
            g = evaluate_G(metric, r * u)
            ginv_u = np.linalg.solve(g, u)
            best = max(best, r * float(np.sqrt(u @ ginv_u)))
    return best


def check_theorem_velocity_bound(trace: GeodesicTrace, metric: MetricField,
                                 rho0: float, c0: Optional[float] = None,
                                 hypothesis_samples=512) -> float:
    """Worst violation of |gamma(t)| >= rho0 t - max(|x0|, c0) past the ramp-up time.

    Nonnegative means the bound holds on the trace.  Raises
    InapplicableTheoremError when r alpha + 1 >= rho0 fails on a sample grid,
    when rho0 exceeds the interior convexity constant, or when the trace is
    shorter than the ramp-up time (max(|x0|, c0) + c0) / rho0.
    """
    if rho0 <= 0.0:
        raise InapplicableTheoremError("rho0 must be positive")
    if rho0 > metric.rho_c + 1e-12:
        raise InapplicableTheoremError(
            f"rho0={rho0:.3g} exceeds interior constant rho_c={metric.rho_c:.3g}")
    r_hi = max(float(np.max(trace.r)), metric.r_c * (1.0 + 1e-9))
    rs = np.linspace(metric.r_c, r_hi, hypothesis_samples)
    slack = rs * np.asarray(metric.alpha(rs, None), float) + 1.0 - rho0
    if float(np.min(slack)) < -1e-9:
        bad = rs[int(np.argmin(slack))]
        raise InapplicableTheoremError(
            f"r alpha + 1 >= rho0 fails near r={bad:.4g} (slack {np.min(slack):.3g})")
    c0 = estimate_c0(metric) if c0 is None else c0
    x0r = float(np.linalg.norm(trace.x0))
    offset = max(x0r, c0)
    c_emp = (offset + c0) / rho0
    sel = trace.t > c_emp
    if not np.any(sel):
        raise InapplicableTheoremError(f"trace shorter than ramp-up time {c_emp:.3g}")
    return float(np.min(trace.r[sel] - (rho0 * trace.t[sel] - offset)))


def crossing_time(trace: GeodesicTrace, tol=H_CROSSING_TOL):
    """First recorded time after which h stays >= -tol; None if never."""
    h = trace.h
    below = h < -tol
    if not np.any(below):
        return float(trace.t[0]), 0
    last = int(np.flatnonzero(below)[-1])
    if last + 1 >= h.shape[0]:
        return None, None
    return float(trace.t[last + 1]), last + 1


def f_envelope(metric: MetricField, y_max: float, n=2048):
    """Decreasing envelope of alpha + 1/r on [r_c, y_max] (sampled)."""
    zs = np.linspace(metric.r_c, max(y_max, metric.r_c * (1.0 + 1e-9)), n)
    vals = np.asarray(metric.alpha(zs, None), float) + 1.0 / zs
    env = np.minimum.accumulate(vals)
    return zs, env


def check_theorem_integral_bound(trace: GeodesicTrace, metric: MetricField) -> float:
    """Worst violation of the integral escape lower bound past the crossing time.

    The crossing time t0 is located from the trace as the start of the
    persistent h >= 0 regime; the bound's integrand uses the decreasing
    envelope f(y) of alpha + 1/r and nested trapezoid quadrature on the
    trace's own time grid.
    """
    t0, i0 = crossing_time(trace)
    if t0 is None or t0 > 0.5 * trace.T:
        raise InapplicableTheoremError("no persistent h >= 0 regime before T/2")
    x0r = float(np.linalg.norm(trace.x0))
    zs, env = f_envelope(metric, x0r + trace.T + metric.r_c)
    args = np.maximum(x0r + trace.t, zs[0])
    f_vals = np.interp(args, zs, env)
    inner = np.concatenate([[0.0], cumulative_trapezoid(f_vals, trace.t)])
    expo = 2.0 * inner
    phi = np.where(expo > 300.0, 1.0, 1.0 - 2.0 / (1.0 + np.exp(np.minimum(expo, 300.0))))
    tail_t = trace.t[i0:]
    tail_phi = phi[i0:]
    rhs = trace.r[i0] + np.concatenate([[0.0], cumulative_trapezoid(tail_phi, tail_t)])
    margin = trace.r[i0:] - rhs
    if margin.shape[0] <= 1:
        raise InapplicableTheoremError("crossing found only at the final sample")
    return float(np.min(margin[1:]))


@dataclass
class DichotomyResult:
    verdict: str                 # "escaped" | "hit_boundary" | "undecided"
    t0: Optional[float]
    escape_radius: float
    expected_escape: bool        # started on the boundary moving outward


def exterior_dichotomy(trace: GeodesicTrace, metric: MetricField,
                       escape_radius: Optional[float] = None) -> DichotomyResult:
    """Classify an exterior trace: escaped past the threshold radius, hit the
    inner boundary at a located time, or undecided within the trace length."""
    x0r = float(np.linalg.norm(trace.x0))
    if escape_radius is None:
        escape_radius = 10.0 * max(x0r, metric.r_c)
    on_boundary = abs(x0r - metric.r_c) <= 1e-9 * max(1.0, metric.r_c)
    expected = bool(on_boundary and trace.h[0] >= -1e-12)
    if trace.exited:
        return DichotomyResult("hit_boundary", trace.exit_time, escape_radius, expected)
    if trace.final_r > escape_radius:
        return DichotomyResult("escaped", None, escape_radius, expected)
    return DichotomyResult("undecided", None, escape_radius, expected)


# ---------------------------------------------------------------------------
# batch shooting

@dataclass
class ShotResult:
    x0: np.ndarray
    direction: np.ndarray
    verdict: str
    final_r: float
    asymptotic_speed: float
    max_drift: float
    exit_time: Optional[float]
    velocity_margin: Optional[float] = None
    integral_margin: Optional[float] = None
    crossing_t0: Optional[float] = None
    notes: tuple = ()


@dataclass
class EscapeReport:
    shots: list
    seed: int
    T: float
    dt: float
    escape_radius: float
    counts: dict = field(default_factory=dict)

    @property
    def min_velocity_margin(self):
        vals = [s.velocity_margin for s in self.shots if s.velocity_margin is not None]
        return min(vals) if vals else None

    @property
    def min_integral_margin(self):
        vals = [s.integral_margin for s in self.shots if s.integral_margin is not None]
        return min(vals) if vals else None

    @property
    def min_asymptotic_speed(self):
        vals = [s.asymptotic_speed for s in self.shots if s.verdict == "escaped"]
        return min(vals) if vals else None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "T": self.T, "dt": self.dt,
            "escape_radius": self.escape_radius, "counts": self.counts,
            "min_velocity_margin": self.min_velocity_margin,
            "min_integral_margin": self.min_integral_margin,
            "min_asymptotic_speed": self.min_asymptotic_speed,
            "shots": [{
                "x0": [float(c) for c in s.x0],
                "direction": [float(c) for c in s.direction],
                "verdict": s.verdict,
                "final_r": s.final_r,
                "asymptotic_speed": s.asymptotic_speed,
                "max_drift": s.max_drift,
                "exit_time": s.exit_time,
                "velocity_margin": s.velocity_margin,
                "integral_margin": s.integral_margin,
                "crossing_t0": s.crossing_t0,
                "notes": list(s.notes),
            } for s in self.shots],
        }


def shot_directions(x0, count, seed=0) -> np.ndarray:
    """Evenly spread directions in the (radial, tangential) frame at x0 for
    n = 2; seeded uniform sphere samples otherwise.  Index 0 points radially
    outward for n = 2, so quarter indices are exactly tangential."""
    x0 = np.asarray(x0, float)
    n = x0.shape[0]
    r = float(np.linalg.norm(x0))
    if n == 2 and r > _TINY_R:
        u = x0 / r
        tang = np.array([-u[1], u[0]])
        phis = 2.0 * np.pi * np.arange(count) / count
        return np.cos(phis)[:, None] * u + np.sin(phis)[:, None] * tang
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((count, n))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def batch_shoot(metric: MetricField, x0_set, direction_count, T, dt=DEFAULT_DT,
                seed=0, record_every=None, rho0=None, check_integral=False,
                escape_radius=None) -> EscapeReport:
    """Shoot geodesic fans from each base point and aggregate escape verdicts.

    Deterministic for a fixed seed.  Optional escape-bound checks attach
    per-shot margins; inapplicable hypotheses are recorded as notes rather
    than failures.
    """
    x0_set = [np.asarray(x, float) for x in np.atleast_2d(np.asarray(x0_set, float))]
    if record_every is None:
        record_every = max(1, int(round(T / dt)) // 20000)
    shots = []
    counts = {"escaped": 0, "trapped": 0, "hit_inner_boundary": 0}
    radius_used = None
    for base_index, x0 in enumerate(x0_set):
        dirs = shot_directions(x0, direction_count, seed=seed + base_index)
        batch = integrate_batch(metric, np.tile(x0, (direction_count, 1)), dirs,
                                T, dt=dt, record_every=record_every)
        x0r = float(np.linalg.norm(x0))
        radius = escape_radius if escape_radius is not None else \
            10.0 * max(x0r, metric.r_c)
        radius_used = radius if radius_used is None else max(radius_used, radius)
        for b in range(direction_count):
            tr = batch.trace(b)
            if batch.exited[b]:
                verdict = "hit_inner_boundary"
            elif float(np.linalg.norm(batch.final_x[b])) > radius:
                verdict = "escaped"
            else:
                verdict = "trapped"
            counts[verdict] += 1
            notes = []
            vm = im = t0 = None
            if rho0 is not None:
                try:
                    vm = check_theorem_velocity_bound(tr, metric, rho0)
                except InapplicableTheoremError as exc:
                    notes.append(f"velocity bound inapplicable: {exc}")
            if check_integral:
                try:
                    im = check_theorem_integral_bound(tr, metric)
                    t0, _ = crossing_time(tr)
                except InapplicableTheoremError as exc:
                    notes.append(f"integral bound inapplicable: {exc}")
            shots.append(ShotResult(
                x0=x0, direction=dirs[b], verdict=verdict,
                final_r=float(np.linalg.norm(batch.final_x[b])),
                asymptotic_speed=tr.asymptotic_speed, max_drift=tr.max_drift,
                exit_time=(float(batch.exit_time[b]) if batch.exited[b] else None),
                velocity_margin=vm, integral_margin=im, crossing_t0=t0,
                notes=tuple(notes)))
    return EscapeReport(shots=shots, seed=seed, T=T, dt=dt,
                        escape_radius=radius_used, counts=counts)
