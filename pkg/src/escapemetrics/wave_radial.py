"""Radial reduction of the exterior wave equation: u_tt = u_rr + (m/r) u_r.

The half-line (r0, infinity) with a Dirichlet condition at r0 is truncated at
an outer radius the wave cannot reach within the run time (unit propagation
speed), so no absorbing boundary is needed.  Energies use the volume weight
r^m matching a distance Laplacian of m/r.  The time stepper is the
kick-drift-kick form of leapfrog, which advances (u, u_t) at integer times
and reproduces the classical three-level scheme exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import CFLViolationError

CFL_LIMIT = 0.5
ZERO_ENERGY_FLOOR = 1e-12     # finite-time-extinction threshold relative to E(0)
R2_FIT_MARGIN = 0.1


# ---------------------------------------------------------------------------
# grid and state

@dataclass(frozen=True)
class RadialGrid:
    """Uniform grid on [r0, R_max] with volume weight r^m."""

    r0: float
    R_max: float
    N: int
    m: float
    r: np.ndarray = field(repr=False, default=None)
    dr: float = 0.0

    @classmethod
    def build(cls, r0, R_max, N, m):
        r = np.linspace(r0, R_max, N + 1)
        dr = (R_max - r0) / N
        return cls(r0=r0, R_max=R_max, N=N, m=m, r=r, dr=dr)

    @classmethod
    def for_run(cls, r0, R0_support, T, N, m, margin=1.0):
        """Grid whose truncation boundary is causally out of reach until T."""
        return cls.build(r0, r0 + R0_support + T + margin, N, m)

    @property
    def weight(self) -> np.ndarray:
        return self.r ** self.m


@dataclass
class RadialWaveState:
    """Field and velocity at one time level, Dirichlet at the inner end."""

    u: np.ndarray
    u_t: np.ndarray
    t: float
    lap: Optional[np.ndarray] = None     # cached operator apply at this level


def apply_operator(grid: RadialGrid, u: np.ndarray) -> np.ndarray:
    """u_rr + (m/r) u_r with centered differences; zero on both end nodes."""
    out = np.zeros_like(u)
    dr = grid.dr
    u_rr = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / dr ** 2
    u_r = (u[2:] - u[:-2]) / (2.0 * dr)
    out[1:-1] = u_rr + (grid.m / grid.r[1:-1]) * u_r
    return out


def step_radial(state: RadialWaveState, grid: RadialGrid, dt: float) -> RadialWaveState:
    """Advance one leapfrog step; raises CFLViolationError above dt = 0.5 dr."""
    if dt > CFL_LIMIT * grid.dr + 1e-15:
        raise CFLViolationError(f"dt={dt:.3g} exceeds {CFL_LIMIT} * dr={grid.dr:.3g}")
    lap = state.lap if state.lap is not None else apply_operator(grid, state.u)
    u_new = state.u + dt * state.u_t + 0.5 * dt * dt * lap
    u_new[0] = 0.0
    u_new[-1] = 0.0
    lap_new = apply_operator(grid, u_new)
    ut_new = state.u_t + 0.5 * dt * (lap + lap_new)
    ut_new[0] = 0.0
    ut_new[-1] = 0.0
    return RadialWaveState(u=u_new, u_t=ut_new, t=state.t + dt, lap=lap_new)


def radial_energy(state: RadialWaveState, grid: RadialGrid, a: Optional[float] = None):
    """Total and local energy 0.5 * integral (u_t^2 + u_r^2) r^m dr.

    The local part restricts the trapezoid quadrature to nodes with r <= a.
    """
    u_r = np.gradient(state.u, grid.dr)
    density = 0.5 * (state.u_t ** 2 + u_r ** 2) * grid.weight
    e_total = float(np.trapezoid(density, dx=grid.dr))
    if a is None:
        return e_total, e_total
    mask = grid.r <= a
    e_local = float(np.trapezoid(density[mask], dx=grid.dr)) if np.sum(mask) > 1 else 0.0
    return e_total, e_local


# ---------------------------------------------------------------------------
# initial data

def cubic_bump(a1: float, a2: float) -> Callable:
    """C^2 bump ((r-a1)(a2-r))^3 on [a1, a2], normalized to unit peak."""
    peak = ((a2 - a1) / 2.0) ** 6

    def u0(r):
        r = np.asarray(r, float)
        val = ((r - a1) * (a2 - r)) ** 3 / peak
        return np.where((r > a1) & (r < a2), val, 0.0)

    return u0


def initial_state(grid: RadialGrid, u0: Callable, u1: Optional[Callable] = None) -> RadialWaveState:
    u = np.asarray(u0(grid.r), float)
    ut = np.asarray(u1(grid.r), float) if u1 is not None else np.zeros_like(u)
    u[0] = ut[0] = 0.0
    u[-1] = ut[-1] = 0.0
    return RadialWaveState(u=u, u_t=ut, t=0.0)


# ---------------------------------------------------------------------------
# simulation driver

@dataclass
class RadialEnergySeries:
    t: np.ndarray
    E_total: np.ndarray
    E_local: np.ndarray

    def write_csv(self, path, meta=()):
        with open(path, "w") as fh:
            for line in meta:
                fh.write(f"# {line}\n")
            fh.write("t,E_total,E_local\n")
            for t, et, el in zip(self.t, self.E_total, self.E_local):
                fh.write(f"{t!r},{et!r},{el!r}\n")


def simulate_radial(grid: RadialGrid, state: RadialWaveState, T: float,
                    dt: Optional[float] = None, a: Optional[float] = None,
                    record_every: int = 8, on_step: Optional[Callable] = None):
    """Run to time T recording the energy series; returns (series, final state)."""
    if dt is None:
        dt = CFL_LIMIT * grid.dr
    n_steps = int(np.ceil(T / dt))
    ts, etot, eloc = [], [], []

    def record(s):
        e_t, e_l = radial_energy(s, grid, a)
        ts.append(s.t)
        etot.append(e_t)
        eloc.append(e_l)

    record(state)
    for k in range(1, n_steps + 1):
        state = step_radial(state, grid, dt)
        if on_step is not None:
            on_step(state, k)
        if k % record_every == 0 or k == n_steps:
            record(state)
    series = RadialEnergySeries(np.array(ts), np.array(etot), np.array(eloc))
    return series, state


# ---------------------------------------------------------------------------
# decay classification

@dataclass
class DecayFit:
    kind: str                    # finite_time_zero | exponential | polynomial | inconclusive
    rate: Optional[float]        # d log E / dt for the exponential fit
    exponent: Optional[float]    # d log E / d log t for the polynomial fit
    r2_exp: float
    r2_poly: float
    window: tuple

    def to_dict(self):
        return {"kind": self.kind, "rate": self.rate, "exponent": self.exponent,
                "r2_exp": self.r2_exp, "r2_poly": self.r2_poly,
                "window": list(self.window)}


def _linfit_r2(x, y):
    coef = np.polyfit(x, y, 1)
    pred = np.polyval(coef, x)
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return float(coef[0]), r2


def decay_classify(t, E, E0: Optional[float] = None, window=None) -> DecayFit:
    """Classify a local-energy series after the outgoing front has left.

    finite_time_zero when the series dips below 1e-12 of the initial energy;
    otherwise the better of the log-linear (exponential) and log-log
    (polynomial) least-squares fits wins if its R^2 leads by at least 0.1,
    else the result is inconclusive.
    """
    t = np.asarray(t, float)
    E = np.asarray(E, float)
    E0 = float(E[0]) if E0 is None else E0
    if window is not None:
        sel = (t >= window[0]) & (t <= window[1])
        t, E = t[sel], E[sel]
    window = (float(t[0]), float(t[-1]))
    if float(np.min(E)) <= ZERO_ENERGY_FLOOR * E0:
        return DecayFit("finite_time_zero", None, None, 0.0, 0.0, window)
    pos = E > 0
    t, E = t[pos], E[pos]
    log_e = np.log(E)
    rate, r2_exp = _linfit_r2(t, log_e)
    exponent, r2_poly = _linfit_r2(np.log(t), log_e)
    if r2_poly - r2_exp >= R2_FIT_MARGIN:
        kind = "polynomial"
    elif r2_exp - r2_poly >= R2_FIT_MARGIN:
        kind = "exponential"
    else:
        kind = "inconclusive"
    return DecayFit(kind, rate, exponent, r2_exp, r2_poly, window)


@dataclass
class RadialDecayReport:
    m: float
    fit: DecayFit
    series: RadialEnergySeries
    E0: float
    grid: RadialGrid


def radial_decay_experiment(m: float, r0=1.0, a=4.0, R0_support=3.0, T=100.0,
                            N=8192, bump=(1.5, 2.5), record_every=8,
                            post_transit_pad=2.0) -> RadialDecayReport:
    """Run the standard decay measurement for one radial coefficient m.

    Fits are restricted to t in [a + R0_support + pad, T], after the direct
    and reflected fronts have cleared the observation ball.
    """
    grid = RadialGrid.for_run(r0, R0_support, T, N, m)
    state = initial_state(grid, cubic_bump(*bump))
    series, _ = simulate_radial(grid, state, T, a=a, record_every=record_every)
    e0 = float(series.E_total[0])
    fit = decay_classify(series.t, series.E_local, E0=e0,
                         window=(a + R0_support + post_transit_pad, T))
    return RadialDecayReport(m=m, fit=fit, series=series, E0=e0, grid=grid)
