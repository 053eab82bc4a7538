"""Upwind simulation of the linearized plant in Riemann coordinates."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .exceptions import ConfigError, DivergenceError, DomainError, GridMismatchError, StabilityError
from .model import Equilibrium, LinearizedSystem

DEFAULT_CFL = 0.9
DEFAULT_NX = 100
DEFAULT_T_END = 450.0
DEFAULT_DECIMATION = 10


@dataclass(frozen=True)
class GridSpec:
    nx: int
    dx: float
    dt: float
    t_end: float
    cfl: float = DEFAULT_CFL

    def __post_init__(self):
        if self.nx < 2 or self.dx <= 0 or self.dt <= 0 or self.t_end < 0:
            raise DomainError(f"invalid grid {self}")
        if not 0 < self.cfl <= 1:
            raise DomainError("cfl must lie in (0, 1]")

    @property
    def length(self):
        return self.nx * self.dx

    @property
    def x(self):
        return np.linspace(0.0, self.length, self.nx + 1)

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))

    def max_stable_dt(self, sys: LinearizedSystem):
        return self.cfl * self.dx / sys.max_speed


def make_grid(sys: LinearizedSystem, nx=None, t_end=DEFAULT_T_END, cfl=DEFAULT_CFL, dt=None):
    """Grid on the road of ``sys``; ``dt`` defaults to the CFL limit.

    A default ``dt`` is shrunk slightly so that it divides ``t_end`` exactly.
    """
    nx = sys.nx if nx is None else int(nx)
    dx = sys.length / nx
    if dt is None:
        dt = cfl * dx / sys.max_speed
        if t_end > 0:
            dt = t_end / math.ceil(t_end / dt)
    return GridSpec(nx=nx, dx=dx, dt=float(dt), t_end=float(t_end), cfl=cfl)


@dataclass(frozen=True, eq=False)
class SimState:
    t: float
    w_plus: np.ndarray   # (3, nx+1)
    w_minus: np.ndarray  # (nx+1,)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.w_plus)) and np.all(np.isfinite(self.w_minus))):
            raise DivergenceError(f"non-finite state at t={self.t:.3f}s")

    @classmethod
    def from_w(cls, t, w):
        w = np.asarray(w, dtype=float)
        return cls(t=float(t), w_plus=w[:3].copy(), w_minus=w[3].copy())

    @property
    def w(self):
        return np.vstack([self.w_plus, self.w_minus[None]])

    def l2_norm(self, dx):
        return l2_norm(self.w, dx)


def l2_norm(w, dx):
    """Trapezoid L2 norm over x of a (k, nx+1) stack of fields."""
    w = np.atleast_2d(w)
    sq = np.sum(w * w, axis=0)
    return float(np.sqrt(dx * (np.sum(sq) - 0.5 * (sq[0] + sq[-1]))))


# --------------------------------------------------------------------------
# initial conditions

IC_KINDS = ("sinusoidal", "non_recurrent", "linear")


def physical_profile(kind, eq: Equilibrium, x, length, amplitude=1.0):
    """Deviation profiles ``(rho_h, v_h, rho_a, v_a)`` of the named initial condition.

    ``sinusoidal`` uses the non-recurrent amplitudes over one full period;
    ``linear`` uses the normalized coordinate ``x / L``.
    """
    x = np.asarray(x, dtype=float)
    if kind == "sinusoidal":
        shape = np.sin(2.0 * np.pi * x / length)
    elif kind == "non_recurrent":
        shape = np.sin(np.pi * x / length)
    elif kind == "linear":
        shape = x / length
    else:
        raise ConfigError(f"unknown initial condition {kind!r}; expected one of {IC_KINDS}")
    q = 0.25 * amplitude * shape
    return np.vstack([
        eq.rho_h_star * q,
        -eq.v_h_star * q,
        eq.rho_a_star * q,
        -eq.v_a_star * q,
    ])


def make_initial_condition(kind, eq: Equilibrium, sys: LinearizedSystem, grid: GridSpec,
                           amplitude=1.0) -> SimState:
    _check_nx(sys, grid)
    z = physical_profile(kind, eq, grid.x, grid.length, amplitude)
    return SimState.from_w(0.0, sys.to_riemann(z))


def to_physical(state, sys: LinearizedSystem, eq: Equilibrium):
    """``(rho_h, v_h, rho_a, v_a)`` over x for a state (or a raw (4, nx+1) array)."""
    w = state.w if isinstance(state, SimState) else np.asarray(state, dtype=float)
    return eq.as_vector()[:, None] + sys.to_deviation(w)


def to_riemann(physical, sys: LinearizedSystem, eq: Equilibrium):
    return sys.to_riemann(np.asarray(physical, dtype=float) - eq.as_vector()[:, None])


# --------------------------------------------------------------------------
# stepping


def _check_nx(sys, grid):
    if sys.nx != grid.nx:
        raise GridMismatchError(f"system sampled on {sys.nx} cells, grid has {grid.nx}")


def check_cfl(sys: LinearizedSystem, grid: GridSpec):
    limit = grid.max_stable_dt(sys)
    if grid.dt > limit * (1 + 1e-12):
        raise StabilityError(
            f"dt={grid.dt:.4g}s exceeds the CFL limit {limit:.4g}s "
            f"(cfl={grid.cfl}, dx={grid.dx:.4g}m, max|lambda|={sys.max_speed:.4g}m/s)"
        )


def advance(w, sys: LinearizedSystem, u, dt, dx, sigma=None):
    """One upwind step on a raw (4, nx+1) array; boundaries imposed last.

    ``sigma`` is the sampled (nx+1, 4, 4) coupling and may be passed to skip
    the lookup.
    """
    sigma = sys.coupling(sys.x) if sigma is None else sigma
    lam = sys.lam
    c = lam * dt / dx
    src = np.einsum("xij,jx->ix", sigma, w)
    new = w + dt * src
    new[:3, 1:] -= c[:3, None] * (w[:3, 1:] - w[:3, :-1])
    new[3, :-1] -= c[3] * (w[3, 1:] - w[3, :-1])
    new[:3, 0] = sys.q_bc * new[3, 0]
    new[3, -1] = sys.r_bc @ new[:3, -1] + u
    return new


def step(state: SimState, sys: LinearizedSystem, u_bar_d, grid: GridSpec) -> SimState:
    """Advance ``state`` by ``grid.dt`` under the boundary control ``u_bar_d``."""
    _check_nx(sys, grid)
    check_cfl(sys, grid)
    new = advance(state.w, sys, float(u_bar_d), grid.dt, grid.dx, sys._sampled())
    return SimState.from_w(state.t + grid.dt, new)


# --------------------------------------------------------------------------
# closed-loop runs


class ControllerHook(Protocol):
    """Called once per step with the current state; returns the applied control."""

    def __call__(self, state: SimState, step_index: int) -> float: ...


@dataclass
class ControlRecord:
    t: float
    u_continuous: float
    u_applied: float
    triggered: bool


@dataclass
class Trajectory:
    grid: GridSpec
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    physical: list | None = None

    def append_snapshot(self, state: SimState, phys=None):
        if self.times and state.t <= self.times[-1]:
            raise ValueError("snapshot times must increase strictly")
        self.times.append(state.t)
        self.states.append(state)
        if phys is not None:
            if self.physical is None:
                self.physical = []
            self.physical.append(phys)

    @property
    def t(self):
        return np.asarray(self.times)

    @property
    def final(self):
        return self.states[-1]

    def norms(self):
        return np.array([s.l2_norm(self.grid.dx) for s in self.states])

    def physical_array(self):
        """(n_snapshots, 4, nx+1) array of ``rho_h, v_h, rho_a, v_a``."""
        if self.physical is None:
            raise ValueError("trajectory carries no physical-state history")
        return np.asarray(self.physical)

    def event_times(self):
        return [c.t for c in self.controls if c.triggered]

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        x = self.grid.x
        phys = self.physical_array() if self.physical is not None else None
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "x", "rho_h", "v_h", "rho_a", "v_a", "w1", "w2", "w3", "w4"])
            for k, (t, st) in enumerate(zip(self.times, self.states)):
                w = st.w
                p = phys[k] if phys is not None else np.full((4, x.size), np.nan)
                for j in range(x.size):
                    wr.writerow([f"{t:.6g}", f"{x[j]:.6g}", *(f"{v:.10g}" for v in p[:, j]),
                                 *(f"{v:.10g}" for v in w[:, j])])

    def write_control_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "u_continuous", "u_applied", "triggered_flag"])
            for c in self.controls:
                wr.writerow([f"{c.t:.6g}", f"{c.u_continuous:.10g}", f"{c.u_applied:.10g}",
                             int(c.triggered)])


def deviation_norms(trajectory: Trajectory, eq: Equilibrium):
    """L2 norms over x of the physical deviation ``(rho_h, v_h, rho_a, v_a) - eq`` in SI units."""
    z = trajectory.physical_array() - eq.as_vector()[None, :, None]
    return np.array([l2_norm(zk, trajectory.grid.dx) for zk in z])


def open_loop_hook(state, step_index):
    return 0.0


def run(initial: SimState, sys: LinearizedSystem, grid: GridSpec, controller: Callable = None,
        decimation=DEFAULT_DECIMATION, eq: Equilibrium | None = None,
        on_step: Callable | None = None) -> Trajectory:
    """Integrate to ``grid.t_end``, calling ``controller`` before every step.

    ``controller`` may return a bare float or a ``ControlRecord``; either way
    the control history is recorded. With ``eq`` the physical state is stored
    alongside each snapshot. ``on_step(state, next_state)`` is called after
    every step (observers use it to read the measurement).
    """
    _check_nx(sys, grid)
    check_cfl(sys, grid)
    controller = open_loop_hook if controller is None else controller
    sigma = sys._sampled()
    traj = Trajectory(grid=grid)
    phys = (lambda s: to_physical(s, sys, eq)) if eq is not None else (lambda s: None)
    traj.append_snapshot(initial, phys(initial))
    state = initial
    n_steps = grid.n_steps
    for k in range(n_steps):
        try:
            out = controller(state, k)
        except Exception as exc:  # noqa: BLE001 - re-raised with context
            raise type(exc)(f"controller failed at t={state.t:.3f}s: {exc}") from exc
        if isinstance(out, ControlRecord):
            rec = out
        else:
            rec = ControlRecord(t=state.t, u_continuous=float(out), u_applied=float(out), triggered=False)
        traj.controls.append(rec)
        new = SimState.from_w((k + 1) * grid.dt, advance(state.w, sys, rec.u_applied, grid.dt, grid.dx, sigma))
        if on_step is not None:
            on_step(state, new)
        state = new
        if (k + 1) % decimation == 0 or k + 1 == n_steps:
            traj.append_snapshot(state, phys(state))
    return traj
