"""Traffic performance indices and trigger statistics."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from .exceptions import DomainError

FUEL_B0 = 25e-3     # 1/s
FUEL_B1 = 24.5e-6   # 1/m
FUEL_B2 = 125e-6    # s^2/m^2
FUEL_B3 = 32.5e-9   # s^2/m^3


@dataclass(frozen=True)
class ClassHistory:
    """Density and speed of one vehicle class sampled on a (t, x) grid."""

    rho: np.ndarray   # (nt, nx+1) veh/m
    v: np.ndarray     # (nt, nx+1) m/s
    t: np.ndarray     # (nt,)
    x: np.ndarray     # (nx+1,)

    def __post_init__(self):
        if self.rho.shape != self.v.shape or self.rho.shape != (self.t.size, self.x.size):
            raise DomainError("density, speed and grid shapes disagree")


def class_histories(trajectory):
    """``(hv, av)`` histories from a trajectory carrying physical states."""
    if trajectory.physical is None:
        raise DomainError("trajectory has no physical-state history; run with eq=...")
    ph = trajectory.physical_array()
    t = trajectory.t
    x = trajectory.grid.x
    return ClassHistory(ph[:, 0], ph[:, 1], t, x), ClassHistory(ph[:, 2], ph[:, 3], t, x)


def _integrate(f, t, x):
    if t.size < 2:
        raise DomainError("at least two time samples are needed to integrate over time")
    return float(trapezoid(trapezoid(f, x, axis=1), t))


def acceleration(h: ClassHistory):
    """Local acceleration ``v_t + v v_x`` by centered differences (one-sided at the edges)."""
    if h.t.size < 2:
        raise DomainError("at least two time samples are needed for an acceleration")
    v_t = np.gradient(h.v, h.t, axis=0)
    v_x = np.gradient(h.v, h.x, axis=1)
    return v_t + h.v * v_x


def _forward_dt(a, t):
    out = np.empty_like(a)
    out[:-1] = np.diff(a, axis=0) / np.diff(t)[:, None]
    out[-1] = out[-2]
    return out


def fuel(h: ClassHistory, accel=None):
    a = acceleration(h) if accel is None else accel
    rate = FUEL_B0 + FUEL_B1 * h.v + FUEL_B2 * h.v * a + FUEL_B3 * h.v**3
    return _integrate(np.maximum(rate, 0.0) * h.rho, h.t, h.x)


def discomfort(h: ClassHistory, accel=None):
    a = acceleration(h) if accel is None else accel
    return _integrate((a**2 + _forward_dt(a, h.t) ** 2) * h.rho, h.t, h.x)


def ttt(h: ClassHistory):
    return _integrate(h.rho, h.t, h.x)


def tmt(h: ClassHistory):
    return _integrate(h.rho * h.v, h.t, h.x)


def total_delay(hv: ClassHistory, av: ClassHistory, free_flow_h, free_flow_a):
    """``(td_h, td_a, td_total)`` with ``TD_i = TTT_i - TMT_i / V_i``."""
    td_h = ttt(hv) - tmt(hv) / free_flow_h
    td_a = ttt(av) - tmt(av) / free_flow_a
    return td_h, td_a, td_h + td_a


def trigger_stats(event_log, t_end, dt):
    """``(count, total_release_time, min_dwell)``.

    Release time counts the steps on which the trigger did not fire. The
    minimum dwell is ``inf`` when fewer than two events were logged.
    """
    events = np.asarray(list(event_log), dtype=float)
    n_steps = int(round(t_end / dt))
    count = int(events.size)
    if count > n_steps and n_steps > 0:
        raise DomainError(f"{count} events cannot fit in {n_steps} steps")
    release = t_end - count * dt
    min_dwell = float(np.min(np.diff(events))) if count > 1 else float("inf")
    return count, release, min_dwell


INDEX_NAMES = ("j_fuel", "j_discom", "j_ttt", "td_h", "td_a", "td_total")


@dataclass
class MetricsReport:
    j_fuel: float
    j_discom: float
    j_ttt: float
    td_h: float
    td_a: float
    td_total: float
    trigger_count: int = 0
    total_release_time: float = 0.0
    min_dwell: float = float("inf")
    improvement_vs_baseline: dict = field(default_factory=dict)

    def indices(self):
        return {k: getattr(self, k) for k in INDEX_NAMES}

    def with_baseline(self, baseline: "MetricsReport"):
        self.improvement_vs_baseline = improvement(self, baseline)
        return self

    def as_dict(self):
        return asdict(self)


def improvement(report: MetricsReport, baseline: MetricsReport):
    """Percentage change of each index against ``baseline`` (negative = reduction)."""
    out = {}
    for k in INDEX_NAMES:
        b = getattr(baseline, k)
        out[k] = float("nan") if b == 0 else 100.0 * (getattr(report, k) - b) / abs(b)
    return out


def compute_metrics(trajectory, params, event_log=None, dt=None) -> MetricsReport:
    """All indices of a trajectory; per-class fuel and discomfort are summed."""
    hv, av = class_histories(trajectory)
    a_h, a_a = acceleration(hv), acceleration(av)
    td_h, td_a, td = total_delay(hv, av, params.free_flow_speed_h, params.free_flow_speed_a)
    rep = MetricsReport(
        j_fuel=fuel(hv, a_h) + fuel(av, a_a),
        j_discom=discomfort(hv, a_h) + discomfort(av, a_a),
        j_ttt=ttt(hv) + ttt(av),
        td_h=td_h,
        td_a=td_a,
        td_total=td,
    )
    if event_log is not None:
        dt = trajectory.grid.dt if dt is None else dt
        rep.trigger_count, rep.total_release_time, rep.min_dwell = trigger_stats(
            event_log, trajectory.grid.t_end, dt)
    return rep


METRICS_CSV_COLUMNS = ("scenario", "J_fuel%", "J_discom%", "J_TTT%", "TD_h%", "TD_a%", "TD_total%",
                       "release_time_s", "trigger_count")


def write_metrics_csv(path, rows):
    """``rows`` is an iterable of ``(scenario_name, MetricsReport)``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(METRICS_CSV_COLUMNS)
        for name, rep in rows:
            imp = rep.improvement_vs_baseline or {}
            wr.writerow([name, *(f"{imp.get(k, float('nan')):.4f}" for k in INDEX_NAMES),
                         f"{rep.total_release_time:.4f}", rep.trigger_count])
