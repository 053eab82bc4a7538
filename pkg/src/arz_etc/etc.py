"""Backstepping boundary control with a dynamic event trigger.

The held control is refreshed only when

    zeta B e^{mu L / Lambda-} d^2 >= zeta mu sigma V - m

where ``d`` is the gap between the held and the continuous control, ``V`` the
Lyapunov functional of the target state and ``m`` a negative auxiliary
variable driven by

    m' = -eta m + B e^{mu L / Lambda-} d^2 - sigma mu V
         - sum_i varsigma_i alpha_i(L)^2 - varsigma_4 beta(0)^2.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DomainError, InvariantViolation
from .kernels import KernelSet, forward_transform, trapezoid_weights
from .model import LinearizedSystem
from .sim import ControlRecord, SimState

DEFAULT_M0 = -10.0


@dataclass(frozen=True)
class EtcParams:
    zeta: float = 8e-3
    sigma: float = 1e-4
    eta: float = 0.9
    mu: float = 5e-4
    a_coef: tuple = (2e-2, 3e-3, 4e-3)
    b_coef: float = 9e-3
    varsigma: tuple = (2e-10, 2e-9, 1.2e-12, 1e-2)
    m0: float = DEFAULT_M0

    def __post_init__(self):
        object.__setattr__(self, "a_coef", tuple(float(a) for a in self.a_coef))
        object.__setattr__(self, "varsigma", tuple(float(s) for s in self.varsigma))
        if len(self.a_coef) != 3 or len(self.varsigma) != 4:
            raise DomainError("a_coef needs 3 entries and varsigma 4")
        for name in ("zeta", "sigma", "eta", "mu", "b_coef"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)}")
        if min(self.a_coef) <= 0 or min(self.varsigma) <= 0:
            raise DomainError("A_i and varsigma_i must be positive")
        if not self.m0 < 0:
            raise DomainError(f"m0 must be strictly negative, got {self.m0}")

    def with_updates(self, **changes):
        from dataclasses import replace

        return replace(self, **changes)


def paper_etc_params(**overrides) -> EtcParams:
    return EtcParams(**overrides)


def boundary_gain(params: EtcParams, sys: LinearizedSystem):
    """``B e^{mu L / Lambda-}``, the weight of ``d^2`` in both the trigger and ``m'``."""
    return params.b_coef * math.exp(params.mu * sys.length / sys.lambda_minus)


# --------------------------------------------------------------------------
# control laws


def _split(state):
    if isinstance(state, SimState):
        return state.w_plus, state.w_minus
    w = np.asarray(state, dtype=float)
    return w[:3], w[3]


def control_from_target(alpha, beta, w_plus_at_L, kernels: KernelSet, sys: LinearizedSystem):
    """``int_0^L (L(L, xi) alpha + N(L, xi) beta) dxi - R w+(L)``."""
    if not kernels.has_inverse:
        raise DomainError("control law needs the inverse kernels")
    c = trapezoid_weights(kernels.grid_n, kernels.dx)[-1]
    integral = np.sum(c * (np.sum(kernels.l[:, -1, :] * alpha, axis=0) + kernels.n_kernel[-1] * beta))
    return float(integral - sys.r_bc @ np.asarray(w_plus_at_L))


def continuous_control(state, kernels: KernelSet, sys: LinearizedSystem) -> float:
    """Continuous backstepping law evaluated on a plant state."""
    w_plus, w_minus = _split(state)
    alpha, beta = forward_transform(w_plus, w_minus, kernels)
    return control_from_target(alpha, beta, w_plus[:, -1], kernels, sys)


def backstepping_hook(kernels: KernelSet, sys: LinearizedSystem):
    """Controller hook for :func:`arz_etc.sim.run` applying the continuous law every step."""

    def hook(state, step_index):
        u = continuous_control(state, kernels, sys)
        return ControlRecord(t=state.t, u_continuous=u, u_applied=u, triggered=True)

    return hook


# --------------------------------------------------------------------------
# Lyapunov functional and trigger


def lyapunov_weights(params: EtcParams, sys: LinearizedSystem, x=None):
    """Weights ``(A_i/lambda_i) e^{-mu x/lambda_i}`` (3, n) and ``(B/Lambda-) e^{mu x/Lambda-}`` (n,)."""
    x = sys.x if x is None else np.asarray(x, dtype=float)
    lam = sys.lambda_plus
    a = np.asarray(params.a_coef)
    wa = (a / lam)[:, None] * np.exp(-params.mu * x[None, :] / lam[:, None])
    wb = (params.b_coef / sys.lambda_minus) * np.exp(params.mu * x / sys.lambda_minus)
    return wa, wb


def lyapunov(alpha, beta, params: EtcParams, sys: LinearizedSystem, dx=None) -> float:
    """Weighted L2 energy of the target state by the trapezoid rule."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    n = beta.size - 1
    dx = sys.length / n if dx is None else dx
    x = np.linspace(0.0, sys.length, n + 1)
    wa, wb = lyapunov_weights(params, sys, x)
    integrand = np.sum(wa * alpha**2, axis=0) + wb * beta**2
    return float(np.sum(trapezoid_weights(n, dx)[-1] * integrand))


def m_rate(m, d, V, alpha_at_L, beta_at_0, params: EtcParams, sys: LinearizedSystem):
    s = np.asarray(params.varsigma)
    return (-params.eta * m + boundary_gain(params, sys) * d * d - params.sigma * params.mu * V
            - float(np.dot(s[:3], np.asarray(alpha_at_L) ** 2)) - s[3] * beta_at_0**2)


def m_step(m, d, V, alpha_at_L, beta_at_0, params: EtcParams, sys: LinearizedSystem, dt):
    """Explicit Euler update of ``m``; a non-negative result raises :class:`InvariantViolation`."""
    if dt <= 0:
        raise DomainError("dt must be positive")
    m = getattr(m, "m", m)
    new = m + dt * m_rate(m, d, V, alpha_at_L, beta_at_0, params, sys)
    if not new < 0:
        raise InvariantViolation(f"dynamic variable left the negative half-line: m={new:.6g}")
    return float(new)


def trigger_margin(d, V, m, params: EtcParams, sys: LinearizedSystem):
    """``zeta B e^{mu L/Lambda-} d^2 - (zeta mu sigma V - m)``; the trigger fires when >= 0."""
    lhs = params.zeta * boundary_gain(params, sys) * d * d
    return lhs - (params.zeta * params.mu * params.sigma * V - m)


def should_trigger(d, V, m, params: EtcParams, sys: LinearizedSystem) -> bool:
    return bool(trigger_margin(d, V, m, params, sys) >= 0)


def trigger_threshold(V, m, params: EtcParams, sys: LinearizedSystem):
    """Smallest ``|d|`` that fires the trigger for the given ``V`` and ``m``."""
    return math.sqrt(max(params.zeta * params.mu * params.sigma * V - m, 0.0)
                     / (params.zeta * boundary_gain(params, sys)))


# --------------------------------------------------------------------------
# trigger bookkeeping


@dataclass
class EventRecord:
    index: int
    t: float
    dwell: float
    u: float
    V: float
    m: float
    guarded: bool = False


@dataclass
class TraceRecord:
    t: float
    V: float
    m: float
    d: float
    margin: float
    triggered: bool

    @property
    def V_d(self):
        return self.V - self.m


@dataclass
class TriggerState:
    """Mutable bookkeeping owned by one closed-loop run."""

    m: float
    t_last_event: float = float("nan")
    held_control: float = 0.0
    event_log: list = field(default_factory=list)
    held_state_snapshot: tuple | None = None
    events: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    @classmethod
    def initial(cls, params: EtcParams):
        return cls(m=params.m0)

    @property
    def n_events(self):
        return len(self.event_log)

    def record_event(self, t, u, snapshot, V, guarded=False):
        if self.event_log and t <= self.event_log[-1]:
            raise InvariantViolation(f"event at t={t} does not follow t={self.event_log[-1]}")
        dwell = t - self.event_log[-1] if self.event_log else 0.0
        self.events.append(EventRecord(len(self.event_log), t, dwell, u, V, self.m, guarded))
        self.event_log.append(t)
        self.t_last_event = t
        self.held_control = u
        self.held_state_snapshot = snapshot

    def write_event_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["event_index", "t_event", "dwell_since_previous", "u_value", "V_at_event", "m_at_event"])
            for e in self.events:
                wr.writerow([e.index, f"{e.t:.6g}", f"{e.dwell:.6g}", f"{e.u:.10g}", f"{e.V:.10g}", f"{e.m:.10g}"])

    def write_trace_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "V", "m", "V_d", "d"])
            for r in self.trace:
                wr.writerow([f"{r.t:.6g}", f"{r.V:.10g}", f"{r.m:.10g}", f"{r.V_d:.10g}", f"{r.d:.10g}"])


def sampled_control(trigger_state: TriggerState) -> float:
    """Zero-order-hold value from the latest event."""
    if not trigger_state.event_log:
        raise DomainError("no event recorded yet")
    return trigger_state.held_control


def discrepancy(state, trigger_state: TriggerState, kernels: KernelSet, sys: LinearizedSystem) -> float:
    """``d = U_d - U``: held control minus the continuous law on the current state."""
    return sampled_control(trigger_state) - continuous_control(state, kernels, sys)


def etc_step(alpha, beta, w_plus_at_L, t, trigger_state: TriggerState, kernels: KernelSet,
             sys: LinearizedSystem, params: EtcParams, dt, guard=True, force=False):
    """One evaluation of the trigger on a target state.

    Returns ``(u_continuous, u_applied, triggered)`` and advances ``m`` by one
    explicit Euler step of length ``dt``.

    The trigger is tested once per step. Because ``m'`` grows like ``|m|/zeta``
    between events, one Euler step can carry ``m`` across zero before the
    inequality is met. With ``guard`` the event also fires when the pending
    update would do so, which keeps ``m < 0`` at step resolution.
    """
    u = control_from_target(alpha, beta, w_plus_at_L, kernels, sys)
    V = lyapunov(alpha, beta, params, sys)
    a_L, b_0 = alpha[:, -1], beta[0]
    first = not trigger_state.event_log
    d = 0.0 if first else trigger_state.held_control - u
    margin = trigger_margin(d, V, trigger_state.m, params, sys)
    fire = first or force or margin >= 0
    guarded = False
    if not fire and guard:
        pending = trigger_state.m + dt * m_rate(trigger_state.m, d, V, a_L, b_0, params, sys)
        if pending >= 0:
            fire = guarded = True
    if fire:
        trigger_state.record_event(t, u, (alpha.copy(), beta.copy()), V, guarded)
        d = 0.0
    trigger_state.trace.append(TraceRecord(t, V, trigger_state.m, d, margin, fire))
    trigger_state.m = m_step(trigger_state.m, d, V, a_L, b_0, params, sys, dt)
    return u, trigger_state.held_control, fire


def etc_controller_hook(kernels: KernelSet, sys: LinearizedSystem, params: EtcParams, dt,
                        trigger_state: TriggerState | None = None, guard=True, force_every_step=False):
    """Full-state event-triggered controller for :func:`arz_etc.sim.run`.

    Returns ``(hook, trigger_state)``; the hook mutates the trigger state.
    """
    ts = TriggerState.initial(params) if trigger_state is None else trigger_state

    def hook(state, step_index):
        alpha, beta = forward_transform(state.w_plus, state.w_minus, kernels)
        u, applied, fired = etc_step(alpha, beta, state.w_plus[:, -1], state.t, ts, kernels, sys,
                                     params, dt, guard=guard, force=force_every_step)
        return ControlRecord(t=state.t, u_continuous=u, u_applied=applied, triggered=fired)

    return hook, ts


# --------------------------------------------------------------------------
# parameter validation


@dataclass(frozen=True)
class Condition:
    name: str
    lhs: float
    rhs: float
    passed: bool
    advisory: bool = False
    note: str = ""


@dataclass(frozen=True)
class ValidationReport:
    conditions: tuple
    gamma_hat: float
    epsilon_hat: tuple | None

    @property
    def mandatory_ok(self):
        return all(c.passed for c in self.conditions if not c.advisory)

    def get(self, name):
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def failed(self):
        return [c for c in self.conditions if not c.passed]

    def lines(self):
        out = []
        for c in self.conditions:
            tag = "PASS" if c.passed else "FAIL"
            kind = " (advisory)" if c.advisory else ""
            out.append(f"{tag} {c.name}{kind}: lhs={c.lhs:.6g} rhs={c.rhs:.6g} {c.note}".rstrip())
        out.append(f"gamma_hat={self.gamma_hat:.6g}")
        return out


def epsilon_hat(kernels: KernelSet, sys: LinearizedSystem):
    """Empirical surrogates ``8 l_i(L,L)^2 lambda_i^2 + 8 |j_i| |R|^2``.

    ``j_i`` is read as the sup over x of row i of ``Sigma++``.
    """
    if not kernels.has_inverse:
        raise DomainError("epsilon surrogates need the inverse kernels")
    l_LL = kernels.l[:, -1, -1]
    j = np.max(np.abs(sys.sigma_pp), axis=(0, 2))
    r2 = float(np.sum(sys.r_bc**2))
    return tuple(8 * l_LL**2 * sys.lambda_plus**2 + 8 * j * r2)


def gamma_hat(params: EtcParams, sys: LinearizedSystem):
    """Decay-rate loss from the coupling, with the norm-equivalence constants taken as
    ``p3 = min`` of the Lyapunov weights and ``p1 = 1``."""
    wa, wb = lyapunov_weights(params, sys)
    p3 = min(float(wa.min()), float(wb.min()))
    spp = float(np.max(np.linalg.norm(sys.sigma_pp, ord=2, axis=(1, 2))))
    spm = float(np.max(np.linalg.norm(sys.sigma_pm, axis=1)))
    if p3 <= 0:
        return float("inf")   # the functional is not positive definite
    return 2 * max(params.a_coef) / (p3 * float(np.min(sys.lambda_plus))) * (spp + 2.0 * spm)


def validate_etc_params(params: EtcParams, sys: LinearizedSystem, eq=None,
                        kernels: KernelSet | None = None) -> ValidationReport:
    """Check the verifiable design inequalities; kernel-dependent ones are advisory."""
    conds = []
    a = np.asarray(params.a_coef)
    s = np.asarray(params.varsigma)
    q = np.asarray(sys.q_bc)
    L = sys.length
    for i in range(3):
        rhs = a[i] * math.exp(-params.mu * L / sys.lambda_plus[i])
        conds.append(Condition(f"varsigma{i + 1}<=A{i + 1}exp(-muL/lambda{i + 1})", s[i], rhs, s[i] <= rhs))
    aq = float(np.sum(a * q**2))
    lhs = s[3] + aq - params.b_coef
    conds.append(Condition("varsigma4+sum(A_i q_i^2)-B<=0", lhs, 0.0, lhs <= 0,
                           note=f"sum(A_i q_i^2)={aq:.6g}"))
    rhs4 = max(0.0, -2 * params.zeta * params.mu * (aq - params.b_coef))
    conds.append(Condition("varsigma4>=max(0,-2 zeta mu (sum(A_i q_i^2)-B))", s[3], rhs4, s[3] >= rhs4))
    conds.append(Condition("m0<0", params.m0, 0.0, params.m0 < 0))
    conds.append(Condition("B>0", params.b_coef, 0.0, params.b_coef > 0))

    g = gamma_hat(params, sys)
    rate = params.mu * (1 - params.sigma) - g
    conds.append(Condition("mu(1-sigma)-gamma_hat>0", rate, 0.0, rate > 0, advisory=True))
    conds.append(Condition("eta>=mu(1-sigma)-gamma_hat", params.eta, rate, params.eta >= rate, advisory=True))

    eps = None
    if kernels is not None and kernels.has_inverse:
        eps = epsilon_hat(kernels, sys)
        bg = boundary_gain(params, sys)
        for i in range(3):
            need = max(params.zeta * bg * eps[i], params.zeta * params.mu * eps[i])
            conds.append(Condition(f"varsigma{i + 1}>=max(zeta B e eps{i + 1}, zeta mu eps{i + 1})",
                                   s[i], need, s[i] >= need, advisory=True))
    return ValidationReport(conditions=tuple(conds), gamma_hat=g, epsilon_hat=eps)
