"""Scenario configuration, orchestration and CSV export.

A scenario file is an INI document. Every key is declared in ``SCHEMA`` with
its type, default, unit and meaning; values are written in traffic units
(km/h, veh/km, veh/h) and converted to SI when the run is wired up. Unknown
sections or keys are rejected with their line number.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType

import numpy as np

from . import etc as etc_mod
from . import sim
from .exceptions import ArzEtcError, ConfigError, DomainError
from .kernels import KernelSet, forward_transform, inverse_transform, kernel_residual, solve_kernels
from .metrics import INDEX_NAMES, MetricsReport, compute_metrics, write_metrics_csv
from .model import (
    KMH,
    PER_KM,
    Equilibrium,
    LinearizedSystem,
    ModelParams,
    calibrate_vehicle_width,
    compute_equilibrium,
    equilibrium_at_penetration,
    equilibrium_for_demand,
    linearize,
    regime_map,
)
from .observer import ObserverState, output_feedback_etc_hook, solve_observer_gains

log = logging.getLogger(__name__)

PER_HOUR = 1.0 / 3600.0

CONTROLLERS = ("open_loop", "backstepping", "etc", "observer_etc")
EQUILIBRIUM_MODES = ("densities", "demand", "penetration")
SWEEP_AXES = ("spacing_a", "demand", "penetration", "mu", "sigma", "zeta")

# Class demands (veh/h) of the three demand levels.
DEMAND_LEVELS = {
    "high": (4555.0, 1955.0),
    "medium": (4104.0, 1560.0),
    "low": (3461.0, 1505.0),
}


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    kind: str          # float, int, bool, str, choice, list
    default: object
    unit: str = ""
    doc: str = ""
    choices: tuple = ()
    positive: bool = False


SCHEMA = (
    Key("scenario", "name", "str", "paper_baseline", doc="output sub-directory and metrics row label"),
    Key("scenario", "controller", "choice", "etc", choices=CONTROLLERS, doc="boundary controller"),
    Key("scenario", "seed", "int", 0, doc="seed of the random states drawn by kernels-check"),
    Key("scenario", "output_dir", "str", "out", doc="root directory for CSV output"),
    Key("scenario", "compare_open_loop", "bool", True,
        doc="also run the open loop to report improvement percentages"),

    Key("model", "v_max_h", "float", 80.0, "km/h", "free-flow speed of human-driven vehicles", positive=True),
    Key("model", "v_max_a", "float", 60.0, "km/h", "free-flow speed of automated vehicles", positive=True),
    Key("model", "gamma_h", "float", 2.5, "", "fundamental-diagram exponent, HV", positive=True),
    Key("model", "gamma_a", "float", 2.0, "", "fundamental-diagram exponent, AV", positive=True),
    Key("model", "tau_h", "float", 30.0, "s", "relaxation time, HV", positive=True),
    Key("model", "tau_a", "float", 60.0, "s", "relaxation time, AV", positive=True),
    Key("model", "spacing_h", "float", 8.0, "m", "minimum spacing, HV", positive=True),
    Key("model", "spacing_a", "float", 15.0, "m", "minimum spacing, AV", positive=True),
    Key("model", "vehicle_width", "float", 2.07, "m", "vehicle width used by the area occupancy", positive=True),
    Key("model", "calibrate_width", "bool", False,
        doc="replace vehicle_width by the width that gives target_v_h at the configured densities"),
    Key("model", "target_v_h", "float", 32.0, "km/h", "target HV equilibrium speed for calibration", positive=True),
    Key("model", "road_width", "float", 6.5, "m", "road width", positive=True),
    Key("model", "road_length", "float", 1000.0, "m", "road length", positive=True),
    Key("model", "ao_max_h", "float", 0.9, "", "jam area occupancy, HV", positive=True),
    Key("model", "ao_max_a", "float", 0.85, "", "jam area occupancy, AV", positive=True),

    Key("equilibrium", "mode", "choice", "densities", choices=EQUILIBRIUM_MODES,
        doc="how the equilibrium is specified"),
    Key("equilibrium", "rho_h", "float", 110.0, "veh/km", "HV equilibrium density (mode=densities)", positive=True),
    Key("equilibrium", "rho_a", "float", 95.0, "veh/km", "AV equilibrium density (mode=densities)", positive=True),
    Key("equilibrium", "demand_h", "float", 4555.0, "veh/h", "HV demand (mode=demand)", positive=True),
    Key("equilibrium", "demand_a", "float", 1955.0, "veh/h", "AV demand (mode=demand)", positive=True),
    Key("equilibrium", "penetration", "float", 0.5, "",
        "AV share rho_a/(rho_h+rho_a) (mode=penetration)", positive=True),
    Key("equilibrium", "total_flow", "float", 0.0, "veh/h",
        "total flow held fixed (mode=penetration); 0 uses the flow of rho_h, rho_a"),

    Key("etc", "zeta", "float", 8e-3, "", "trigger weight", positive=True),
    Key("etc", "sigma", "float", 1e-4, "", "share of V kept as trigger slack", positive=True),
    Key("etc", "eta", "float", 0.9, "1/s", "decay rate of m", positive=True),
    Key("etc", "mu", "float", 5e-4, "1/s", "exponential weight of the Lyapunov functional", positive=True),
    Key("etc", "a1", "float", 2e-2, "", "Lyapunov weight A1", positive=True),
    Key("etc", "a2", "float", 3e-3, "", "Lyapunov weight A2", positive=True),
    Key("etc", "a3", "float", 4e-3, "", "Lyapunov weight A3", positive=True),
    Key("etc", "b", "float", 9e-3, "", "Lyapunov weight B", positive=True),
    Key("etc", "varsigma1", "float", 2e-10, "", "boundary weight 1", positive=True),
    Key("etc", "varsigma2", "float", 2e-9, "", "boundary weight 2", positive=True),
    Key("etc", "varsigma3", "float", 1.2e-12, "", "boundary weight 3", positive=True),
    Key("etc", "varsigma4", "float", 1e-2, "", "boundary weight 4", positive=True),
    Key("etc", "m0", "float", -10.0, "", "initial value of m, strictly negative"),
    Key("etc", "guard", "bool", True, doc="also fire when the next Euler step of m would reach zero"),

    Key("observer", "literal_boundary", "bool", False,
        doc="inflow boundary of the observer uses its own estimate instead of the measurement"),
    Key("observer", "literal_discrepancy", "bool", False,
        doc="trigger discrepancy uses plant traces at x=L instead of observer values"),

    Key("grid", "nx", "int", 100, "", "number of cells", positive=True),
    Key("grid", "t_end", "float", 450.0, "s", "simulated horizon"),
    Key("grid", "cfl", "float", 0.9, "", "Courant number used when dt is automatic", positive=True),
    Key("grid", "dt", "float", 0.0, "s", "time step; 0 picks the largest CFL-stable step dividing t_end"),
    Key("grid", "decimation", "int", 10, "", "steps between stored snapshots", positive=True),
    Key("grid", "kernel_grid_n", "int", 0, "", "kernel grid intervals; 0 uses nx"),
    Key("grid", "kernel_cache", "str", "", doc="directory of the on-disk kernel cache; empty disables it"),

    Key("initial", "kind", "choice", "sinusoidal", choices=sim.IC_KINDS, doc="initial deviation profile"),
    Key("initial", "amplitude", "float", 1.0, "", "scale applied to the deviation profile"),

    Key("sweep", "axis", "str", "", doc="one of " + ", ".join(SWEEP_AXES) + "; empty for a single run"),
    Key("sweep", "values", "list", (), doc="comma-separated values of the swept quantity"),
    Key("sweep", "workers", "int", 1, "", "concurrent runs", positive=True),
    Key("sweep", "convergence_threshold", "float", 0.01, "",
        "fraction of V(0) defining the Lyapunov convergence time", positive=True),

    Key("regime_map", "n", "int", 50, "", "grid points per density axis", positive=True),
    Key("regime_map", "rho_h_max", "float", 200.0, "veh/km", "largest HV density", positive=True),
    Key("regime_map", "rho_a_max", "float", 150.0, "veh/km", "largest AV density", positive=True),
)

_KEYS = {(k.section, k.name): k for k in SCHEMA}
SECTIONS = tuple(dict.fromkeys(k.section for k in SCHEMA))


def schema_document():
    """JSON-schema style description of the configuration file."""
    doc = {"title": "arz_etc scenario configuration", "type": "object", "properties": {}}
    types = {"float": "number", "int": "integer", "bool": "boolean", "str": "string",
             "choice": "string", "list": "array"}
    for sec in SECTIONS:
        props = {}
        for k in SCHEMA:
            if k.section != sec:
                continue
            entry = {"type": types[k.kind], "default": list(k.default) if k.kind == "list" else k.default}
            if k.unit:
                entry["unit"] = k.unit
            if k.choices:
                entry["enum"] = list(k.choices)
            if k.positive:
                entry["exclusiveMinimum"] = 0
            entry["description"] = k.doc
            props[k.name] = entry
        doc["properties"][sec] = {"type": "object", "additionalProperties": False, "properties": props}
    doc["additionalProperties"] = False
    return doc


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated scenario settings, stored in the units of the file."""

    values: MappingProxyType
    source: str = "<defaults>"

    def __getitem__(self, key):
        return self.values[key]

    def __reduce__(self):
        # mapping proxies do not pickle; sweeps ship configs to worker processes
        return (_rebuild_config, (dict(self.values), self.source))

    def get(self, section, name):
        return self.values[(section, name)]

    def with_values(self, changes):
        """New validated config with ``{(section, key): value}`` replaced."""
        vals = dict(self.values)
        for key, value in changes.items():
            if key not in _KEYS:
                raise ConfigError(f"unknown key [{key[0]}] {key[1]}")
            vals[key] = value
        return _validated(vals, self.source)

    @property
    def name(self):
        return self.get("scenario", "name")

    @property
    def controller(self):
        return self.get("scenario", "controller")

    @property
    def sweep_axis(self):
        return self.get("sweep", "axis") or None

    def model_params(self) -> ModelParams:
        g = self.get
        params = ModelParams(
            free_flow_speed_h=g("model", "v_max_h") * KMH,
            free_flow_speed_a=g("model", "v_max_a") * KMH,
            gamma_h=g("model", "gamma_h"),
            gamma_a=g("model", "gamma_a"),
            tau_h=g("model", "tau_h"),
            tau_a=g("model", "tau_a"),
            spacing_h=g("model", "spacing_h"),
            spacing_a=g("model", "spacing_a"),
            vehicle_width=g("model", "vehicle_width"),
            road_width=g("model", "road_width"),
            road_length=g("model", "road_length"),
            ao_max_h=g("model", "ao_max_h"),
            ao_max_a=g("model", "ao_max_a"),
        )
        if g("model", "calibrate_width"):
            d = calibrate_vehicle_width(g("model", "target_v_h") * KMH, g("equilibrium", "rho_h") * PER_KM,
                                        g("equilibrium", "rho_a") * PER_KM, params)
            params = params.with_updates(vehicle_width=d)
        return params

    def etc_params(self) -> etc_mod.EtcParams:
        g = self.get
        return etc_mod.EtcParams(
            zeta=g("etc", "zeta"), sigma=g("etc", "sigma"), eta=g("etc", "eta"), mu=g("etc", "mu"),
            a_coef=(g("etc", "a1"), g("etc", "a2"), g("etc", "a3")), b_coef=g("etc", "b"),
            varsigma=tuple(g("etc", f"varsigma{i}") for i in range(1, 5)), m0=g("etc", "m0"))

    def equilibrium(self, params: ModelParams | None = None) -> Equilibrium:
        params = self.model_params() if params is None else params
        g = self.get
        mode = g("equilibrium", "mode")
        base = (g("equilibrium", "rho_h") * PER_KM, g("equilibrium", "rho_a") * PER_KM)
        if mode == "densities":
            return compute_equilibrium(*base, params)
        if mode == "demand":
            return equilibrium_for_demand(g("equilibrium", "demand_h") * PER_HOUR,
                                          g("equilibrium", "demand_a") * PER_HOUR, params)
        flow = g("equilibrium", "total_flow") * PER_HOUR
        if flow <= 0:
            flow = compute_equilibrium(*base, params).total_flow
        return equilibrium_at_penetration(g("equilibrium", "penetration"), flow, params)

    def dumps(self):
        """INI text that loads back to this config."""
        out = io.StringIO()
        for sec in SECTIONS:
            out.write(f"[{sec}]\n")
            for k in SCHEMA:
                if k.section == sec:
                    out.write(f"{k.name} = {_format_value(k, self.values[(sec, k.name)])}\n")
            out.write("\n")
        return out.getvalue()


def _rebuild_config(values, source):
    return ScenarioConfig(MappingProxyType(values), source)


def _format_value(key: Key, value):
    if key.kind == "list":
        return ", ".join(str(v) for v in value)
    if key.kind == "bool":
        return "true" if value else "false"
    if key.kind == "float":
        return repr(float(value))
    return str(value)


def _parse_value(key: Key, raw: str, where: str):
    raw = raw.strip()
    try:
        if key.kind == "float":
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError("not finite")
            return value
        if key.kind == "int":
            return int(raw)
        if key.kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected true or false")
        if key.kind == "list":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot read {raw!r} as {key.kind} ({exc})") from None


def _key_lines(text):
    """``{(section, key): line_number}`` and ``{section: line_number}`` from raw INI text."""
    keys, secs = {}, {}
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            secs.setdefault(section, no)
        elif section is not None and line[:1] not in " \t":
            for sep in ("=", ":"):
                if sep in s:
                    keys.setdefault((section, s.split(sep, 1)[0].strip().lower()), no)
                    break
    return keys, secs


def _validated(vals, source):
    def fail(section, name, msg):
        raise ConfigError(f"{source}: [{section}] {name}: {msg}")

    for (sec, name), key in _KEYS.items():
        v = vals[(sec, name)]
        if key.kind == "choice" and v not in key.choices:
            fail(sec, name, f"must be one of {', '.join(key.choices)}, got {v!r}")
        if key.positive and not v > 0:
            fail(sec, name, f"must be positive, got {v!r}")
    if vals[("grid", "t_end")] < 0:
        fail("grid", "t_end", "must be non-negative")
    for name in ("dt", "kernel_grid_n"):
        if vals[("grid", name)] < 0:
            fail("grid", name, "must be non-negative")
    if vals[("initial", "amplitude")] < 0:
        fail("initial", "amplitude", "must be non-negative")
    if not 0 < vals[("equilibrium", "penetration")] < 1:
        fail("equilibrium", "penetration", "must lie in (0, 1)")
    if vals[("grid", "cfl")] > 1:
        fail("grid", "cfl", "must not exceed 1")
    axis = vals[("sweep", "axis")]
    if axis:
        if axis not in SWEEP_AXES:
            fail("sweep", "axis", f"must be one of {', '.join(SWEEP_AXES)}, got {axis!r}")
        if not vals[("sweep", "values")]:
            fail("sweep", "values", "a sweep axis needs at least one value")
        for v in vals[("sweep", "values")]:
            _axis_value(axis, v, source)
    cfg = ScenarioConfig(MappingProxyType(dict(vals)), source)
    # module-level validation of everything the run will construct
    try:
        params = cfg.model_params()
    except DomainError as exc:
        raise ConfigError(f"{source}: [model] {exc}") from None
    try:
        cfg.etc_params()
    except DomainError as exc:
        raise ConfigError(f"{source}: [etc] {exc}") from None
    try:
        cfg.equilibrium(params)
    except DomainError as exc:
        raise ConfigError(f"{source}: [equilibrium] {exc}") from None
    return cfg


def default_config() -> ScenarioConfig:
    return _validated({k: v.default for k, v in _KEYS.items()}, "<defaults>")


def loads_config(text, source="<string>") -> ScenarioConfig:
    """Parse and validate INI text; missing keys take their documented defaults."""
    parser = configparser.ConfigParser(default_section="\0", interpolation=None,
                                       inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"parse error: {exc}") from None
    key_lines, sec_lines = _key_lines(text)
    vals = {k: v.default for k, v in _KEYS.items()}
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"{source}, line {sec_lines.get(sec, '?')}: unknown section [{sec}]")
        for name, raw in parser.items(sec):
            line = key_lines.get((sec, name), "?")
            key = _KEYS.get((sec, name))
            if key is None:
                raise ConfigError(f"{source}, line {line}: unknown key {name!r} in [{sec}]")
            vals[(sec, name)] = _parse_value(key, raw, f"{source}, line {line}: [{sec}] {name}")
    return _validated(vals, source)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return loads_config(text, source=str(path))


def bundled_configs():
    """Names of the scenario files shipped with the package."""
    root = resources.files("arz_etc") / "configs"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def bundled_config(name) -> ScenarioConfig:
    root = resources.files("arz_etc") / "configs"
    res = root / f"{name}.ini"
    if not res.is_file():
        raise ConfigError(f"no bundled config named {name!r}; have {', '.join(bundled_configs())}")
    return loads_config(res.read_text(), source=f"bundled:{name}")


def resolve_config(spec) -> ScenarioConfig:
    """Load ``spec`` as a file path, or as a bundled config name when no such file exists."""
    if spec is None:
        return default_config()
    if isinstance(spec, ScenarioConfig):
        return spec
    if Path(spec).exists():
        return load_config(spec)
    return bundled_config(str(spec))


# --------------------------------------------------------------------------
# running


@dataclass(frozen=True, eq=False)
class Setup:
    """Everything shared by runs of one linearized system."""

    params: ModelParams
    equilibrium: Equilibrium
    system: LinearizedSystem
    kernels: KernelSet
    grid: sim.GridSpec


def prepare(cfg: ScenarioConfig, kernels: KernelSet | None = None) -> Setup:
    params = cfg.model_params()
    eq = cfg.equilibrium(params)
    nx = cfg.get("grid", "nx")
    sys_ = linearize(eq, params, nx=nx)
    if kernels is None:
        kn = cfg.get("grid", "kernel_grid_n") or nx
        cache = cfg.get("grid", "kernel_cache") or None
        kernels = solve_kernels(sys_, grid_n=kn, cache_dir=cache)
    dt = cfg.get("grid", "dt") or None
    grid = sim.make_grid(sys_, nx=nx, t_end=cfg.get("grid", "t_end"), cfl=cfg.get("grid", "cfl"), dt=dt)
    return Setup(params, eq, sys_, kernels, grid)


@dataclass(eq=False)
class RunResult:
    config: ScenarioConfig
    setup: Setup
    trajectory: sim.Trajectory
    metrics: MetricsReport | None
    trigger: etc_mod.TriggerState | None = None
    observer: object = None
    lyapunov_t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lyapunov_v: np.ndarray = field(default_factory=lambda: np.zeros(0))
    convergence_time: float = float("nan")

    def __iter__(self):
        # ``trajectory, metrics = run_scenario(cfg)``
        return iter((self.trajectory, self.metrics))


def lyapunov_convergence_time(trace, threshold, t_end=None):
    """First time with ``V(t) <= threshold V(0)``; ``t_end`` (or ``inf``) when never reached.

    ``trace`` is a sequence of records with ``t`` and ``V`` attributes or an
    ``(n, 2)`` array of ``(t, V)`` rows.
    """
    if len(trace) and hasattr(trace[0], "V"):
        t = np.array([r.t for r in trace], dtype=float)
        v = np.array([r.V for r in trace], dtype=float)
    else:
        arr = np.asarray(trace, dtype=float).reshape(-1, 2)
        t, v = arr[:, 0], arr[:, 1]
    sentinel = float("inf") if t_end is None else float(t_end)
    if t.size == 0:
        return sentinel
    hit = np.nonzero(v <= threshold * v[0])[0]
    return float(t[hit[0]]) if hit.size else sentinel


def _snapshot_lyapunov(traj: sim.Trajectory, setup: Setup, params: etc_mod.EtcParams):
    v = []
    for s in traj.states:
        a, b = forward_transform(s.w_plus, s.w_minus, setup.kernels)
        v.append(etc_mod.lyapunov(a, b, params, setup.system))
    return traj.t, np.array(v)


def _simulate(cfg: ScenarioConfig, setup: Setup, controller: str) -> RunResult:
    sys_, grid, ks = setup.system, setup.grid, setup.kernels
    ic = sim.make_initial_condition(cfg.get("initial", "kind"), setup.equilibrium, sys_, grid,
                                    amplitude=cfg.get("initial", "amplitude"))
    ep = cfg.etc_params()
    guard = cfg.get("etc", "guard")
    ts = obs_loop = None
    hook = on_step = None
    if controller == "backstepping":
        hook = etc_mod.backstepping_hook(ks, sys_)
    elif controller == "etc":
        hook, ts = etc_mod.etc_controller_hook(ks, sys_, ep, grid.dt, guard=guard)
    elif controller == "observer_etc":
        gains = solve_observer_gains(sys_)
        obs = ObserverState.initial(sys_, gains, literal_boundary=cfg.get("observer", "literal_boundary"))
        hook, on_step, obs_loop = output_feedback_etc_hook(
            obs, ks, sys_, ep, grid, literal_discrepancy=cfg.get("observer", "literal_discrepancy"), guard=guard)
        ts = obs_loop.trigger
    traj = sim.run(ic, sys_, grid, hook, decimation=cfg.get("grid", "decimation"), eq=setup.equilibrium,
                   on_step=on_step)
    if ts is not None and ts.trace:
        lt = np.array([r.t for r in ts.trace])
        lv = np.array([r.V for r in ts.trace])
    else:
        lt, lv = _snapshot_lyapunov(traj, setup, ep)
    conv = lyapunov_convergence_time(np.column_stack([lt, lv]), cfg.get("sweep", "convergence_threshold"),
                                     t_end=grid.t_end)
    return RunResult(cfg, setup, traj, None, ts, obs_loop, lt, lv, conv)


def execute(cfg: ScenarioConfig, controller=None, setup: Setup | None = None,
            baseline: MetricsReport | None = None) -> RunResult:
    """Run one scenario and compute its metrics without writing anything."""
    cfg = resolve_config(cfg)
    controller = cfg.controller if controller is None else controller
    if controller not in CONTROLLERS:
        raise ConfigError(f"unknown controller {controller!r}; choose from {', '.join(CONTROLLERS)}")
    setup = prepare(cfg) if setup is None else setup
    res = _simulate(cfg, setup, controller)
    log_events = res.trigger.event_log if res.trigger is not None else None
    rep = compute_metrics(res.trajectory, setup.params, event_log=log_events, dt=setup.grid.dt)
    if cfg.get("scenario", "compare_open_loop"):
        if baseline is None:
            baseline = rep if controller == "open_loop" else compute_metrics(
                _simulate(cfg, setup, "open_loop").trajectory, setup.params)
        rep.with_baseline(baseline)
    res.metrics = rep
    return res


def write_outputs(res: RunResult, out_dir):
    """Write every CSV of a run under ``out_dir``; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "trajectory.csv", out / "control.csv", out / "metrics.csv", out / "lyapunov.csv",
             out / "config.ini"]
    res.trajectory.write_csv(paths[0])
    res.trajectory.write_control_csv(paths[1])
    write_metrics_csv(paths[2], [(res.config.name, res.metrics)])
    with open(paths[3], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "V"])
        for t, v in zip(res.lyapunov_t, res.lyapunov_v):
            wr.writerow([f"{t:.6g}", f"{v:.10g}"])
    paths[4].write_text(res.config.dumps())
    if res.trigger is not None:
        paths += [out / "events.csv", out / "trace.csv"]
        res.trigger.write_event_csv(paths[-2])
        res.trigger.write_trace_csv(paths[-1])
    if res.observer is not None:
        paths.append(out / "observer_error.csv")
        res.observer.write_error_csv(paths[-1])
    return paths


def run_scenario(cfg, out_dir=None, controller=None, write=True) -> RunResult:
    """Wire model, kernels, simulation, controller and metrics; write CSVs.

    Outputs go to ``<out_dir or scenario.output_dir>/<scenario.name>/``. The
    result unpacks as ``(trajectory, metrics)``.
    """
    cfg = resolve_config(cfg)
    res = execute(cfg, controller=controller)
    if write:
        root = Path(cfg.get("scenario", "output_dir") if out_dir is None else out_dir)
        write_outputs(res, root / cfg.name)
    return res


# --------------------------------------------------------------------------
# sweeps


def _axis_value(axis, raw, source="<sweep>"):
    if axis == "demand":
        if raw not in DEMAND_LEVELS:
            raise ConfigError(f"{source}: [sweep] values: demand level must be one of "
                              f"{', '.join(DEMAND_LEVELS)}, got {raw!r}")
        return raw
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{source}: [sweep] values: {raw!r} is not a number") from None


def config_for_value(cfg: ScenarioConfig, axis, value) -> ScenarioConfig:
    """Copy of ``cfg`` with the swept quantity set and the sweep removed."""
    v = _axis_value(axis, value) if isinstance(value, str) else value
    ch = {("sweep", "axis"): "", ("sweep", "values"): (), ("scenario", "name"): f"{cfg.name}/{axis}={value}"}
    if axis == "spacing_a":
        ch[("model", "spacing_a")] = v
    elif axis == "demand":
        h, a = DEMAND_LEVELS[v]
        ch.update({("equilibrium", "mode"): "demand", ("equilibrium", "demand_h"): h,
                   ("equilibrium", "demand_a"): a})
    elif axis == "penetration":
        ch.update({("equilibrium", "mode"): "penetration", ("equilibrium", "penetration"): v})
    else:
        ch[("etc", axis)] = v
    return cfg.with_values(ch)


@dataclass
class SweepRow:
    value: str
    status: str
    trigger_count: int = 0
    release_time: float = float("nan")
    lyapunov_convergence_time: float = float("nan")
    indices: dict = field(default_factory=dict)
    improvements: dict = field(default_factory=dict)
    error: str = ""


@dataclass
class SweepReport:
    axis: str
    rows: list

    def column(self, name):
        return [getattr(r, name) for r in self.rows]

    def failed(self):
        return [r for r in self.rows if r.status != "ok"]

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["value", "status", "trigger_count", "release_time", "lyapunov_convergence_time",
                         *INDEX_NAMES, *(f"{k}%" for k in INDEX_NAMES), "error"])
            for r in self.rows:
                wr.writerow([r.value, r.status, r.trigger_count, f"{r.release_time:.6g}",
                             f"{r.lyapunov_convergence_time:.6g}",
                             *(f"{r.indices.get(k, float('nan')):.10g}" for k in INDEX_NAMES),
                             *(f"{r.improvements.get(k, float('nan')):.6g}" for k in INDEX_NAMES),
                             r.error])


def _sweep_task(cfg: ScenarioConfig, raw_value, setup, baseline, out_root):
    try:
        res = execute(cfg, setup=setup, baseline=baseline)
        if out_root is not None:
            write_outputs(res, Path(out_root) / cfg.name)
        rep = res.metrics
        return SweepRow(raw_value, "ok", rep.trigger_count, rep.total_release_time, res.convergence_time,
                        rep.indices(), dict(rep.improvement_vs_baseline))
    except Exception as exc:  # noqa: BLE001 - recorded per run, the sweep continues
        log.warning("sweep value %s failed: %s", raw_value, exc)
        return SweepRow(raw_value, "failed", error=f"{type(exc).__name__}: {exc}")


def run_sweep(cfg, out_dir=None, workers=None, write=True) -> SweepReport:
    """One run per sweep value; kernels and the open-loop baseline are shared
    when only controller parameters vary."""
    cfg = resolve_config(cfg)
    axis = cfg.sweep_axis
    if axis is None:
        raise ConfigError("config has no [sweep] axis")
    values = cfg.get("sweep", "values")
    workers = cfg.get("sweep", "workers") if workers is None else int(workers)
    out_root = Path(cfg.get("scenario", "output_dir") if out_dir is None else out_dir) if write else None
    shared_setup = baseline = None
    if axis in ("mu", "sigma", "zeta"):
        base_cfg = config_for_value(cfg, axis, values[0])
        shared_setup = prepare(base_cfg)
        if cfg.get("scenario", "compare_open_loop"):
            baseline = compute_metrics(_simulate(base_cfg, shared_setup, "open_loop").trajectory,
                                       shared_setup.params)
    jobs = []
    for raw in values:
        try:
            jobs.append((config_for_value(cfg, axis, raw), raw))
        except ArzEtcError as exc:
            jobs.append((None, raw, f"{type(exc).__name__}: {exc}"))
    rows = [None] * len(jobs)
    pending = []
    for i, job in enumerate(jobs):
        if job[0] is None:
            rows[i] = SweepRow(job[1], "failed", error=job[2])
        else:
            pending.append(i)
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = {i: pool.submit(_sweep_task, jobs[i][0], jobs[i][1], shared_setup, baseline, out_root)
                    for i in pending}
            for i, fut in futs.items():
                try:
                    rows[i] = fut.result()
                except Exception as exc:  # noqa: BLE001 - a crashed worker fails only its run
                    rows[i] = SweepRow(jobs[i][1], "failed", error=f"{type(exc).__name__}: {exc}")
    else:
        for i in pending:
            rows[i] = _sweep_task(jobs[i][0], jobs[i][1], shared_setup, baseline, out_root)
    report = SweepReport(axis, rows)
    if write:
        report.write_csv(out_root / cfg.name / "sweep.csv")
    return report


# --------------------------------------------------------------------------
# regime map and kernel checks


def regime_grid(cfg: ScenarioConfig):
    """Density axes (SI) of the regime map of ``cfg``."""
    n = cfg.get("regime_map", "n")
    rh = np.linspace(0, cfg.get("regime_map", "rho_h_max"), n + 1)[1:] * PER_KM
    ra = np.linspace(0, cfg.get("regime_map", "rho_a_max"), n + 1)[1:] * PER_KM
    return rh, ra


def export_regime_map(params: ModelParams, rho_h_grid, rho_a_grid, path):
    """Write ``(rho_h, rho_a, lambda4, regime)`` rows; densities in veh/km, lambda4 in m/s."""
    rmap = regime_map(rho_h_grid, rho_a_grid, params)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["rho_h", "rho_a", "lambda4", "regime"])
        for rh, ra, lam4, tag in rmap.rows():
            wr.writerow([f"{rh / PER_KM:.6g}", f"{ra / PER_KM:.6g}", f"{lam4:.10g}", tag])
    return rmap


@dataclass(frozen=True)
class KernelCheck:
    residual: float
    round_trip: float
    samples: int
    residual_tol: float
    round_trip_tol: float

    @property
    def passes(self):
        return self.residual <= self.residual_tol and self.round_trip <= self.round_trip_tol

    def lines(self):
        return [f"{'PASS' if self.residual <= self.residual_tol else 'FAIL'} kernel residual "
                f"{self.residual:.3e} (tol {self.residual_tol:.0e})",
                f"{'PASS' if self.round_trip <= self.round_trip_tol else 'FAIL'} round trip "
                f"{self.round_trip:.3e} over {self.samples} states (tol {self.round_trip_tol:.0e})"]


def kernel_check(sys_: LinearizedSystem, ks: KernelSet, samples=50, seed=0,
                 residual_tol=1e-6, round_trip_tol=1e-4) -> KernelCheck:
    """Kernel PDE residual and worst relative forward/inverse round-trip error on random states."""
    rep = kernel_residual(ks, sys_)
    rng = np.random.default_rng(seed)
    n1 = ks.grid_n + 1
    worst = 0.0
    for _ in range(samples):
        w = rng.standard_normal((4, n1))
        a, b = forward_transform(w[:3], w[3], ks)
        wp, wm = inverse_transform(a, b, ks)
        back = np.vstack([wp, wm[None]])
        worst = max(worst, float(np.linalg.norm(back - w) / np.linalg.norm(w)))
    return KernelCheck(rep.worst, worst, samples, residual_tol, round_trip_tol)


def write_schema(path):
    Path(path).write_text(json.dumps(schema_document(), indent=2) + "\n")
