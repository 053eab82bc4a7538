import csv
import math

import numpy as np
import pytest

from arz_etc import etc, sim
from arz_etc.exceptions import DomainError, InvariantViolation
from arz_etc.kernels import forward_transform


P = etc.EtcParams()


def test_params_validation():
    with pytest.raises(DomainError):
        etc.EtcParams(m0=0.0)
    with pytest.raises(DomainError):
        etc.EtcParams(zeta=-1.0)
    with pytest.raises(DomainError):
        etc.EtcParams(a_coef=(1.0, 1.0))


def test_trigger_examples(system):
    assert not etc.should_trigger(0.0, 0.0, -1.0, P, system)
    V, m = 3.0, -0.2
    thr = etc.trigger_threshold(V, m, P, system)
    oracle = math.sqrt((P.zeta * P.mu * P.sigma * V - m)
                       / (P.zeta * P.b_coef * math.exp(P.mu * system.length / system.lambda_minus)))
    assert thr == pytest.approx(oracle, rel=1e-14)
    assert etc.should_trigger(1.001 * thr, V, m, P, system)
    assert not etc.should_trigger(0.999 * thr, V, m, P, system)


def test_trigger_is_inclusive_at_equality(system):
    d = 0.37
    m = -P.zeta * etc.boundary_gain(P, system) * d * d
    assert etc.trigger_margin(d, 0.0, m, P, system) == 0.0
    assert etc.should_trigger(d, 0.0, m, P, system)


def test_m_decays_like_exponential_without_forcing(system):
    p = P.with_updates(m0=-1.0)
    dt, m = 0.01, -1.0
    for k in range(1, 201):
        m = etc.m_step(m, 0.0, 0.0, np.zeros(3), 0.0, p, system, dt)
        assert m == pytest.approx(-(1 - p.eta * dt) ** k, rel=1e-12)
    assert m == pytest.approx(-math.exp(-p.eta * 2.0), rel=1e-2)


def test_m_at_zero_is_rejected(system):
    with pytest.raises(InvariantViolation):
        etc.m_step(0.0, 0.0, 0.0, np.zeros(3), 0.0, P, system, 0.1)


def test_lyapunov_examples(system):
    n1 = system.nx + 1
    assert etc.lyapunov(np.zeros((3, n1)), np.zeros(n1), P, system) == 0.0
    closed = P.b_coef / P.mu * (math.exp(P.mu * system.length / system.lambda_minus) - 1)
    assert etc.lyapunov(np.zeros((3, n1)), np.ones(n1), P, system) == pytest.approx(closed, rel=1e-8)
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, n1)), rng.standard_normal(n1)
    v = etc.lyapunov(a, b, P, system)
    assert etc.lyapunov(2.5 * a, 2.5 * b, P, system) == pytest.approx(6.25 * v, rel=1e-12)


def _condition_oracle(params, system):
    q = system.q_bc
    aq = sum(a * qi**2 for a, qi in zip(params.a_coef, q))
    per_class = [params.varsigma[i] <= params.a_coef[i] * math.exp(-params.mu * system.length / system.lambda_plus[i])
           for i in range(3)]
    coupled = params.varsigma[3] + aq - params.b_coef
    return per_class, coupled


def test_validation_report_matches_arithmetic(system, kernels):
    rep = etc.validate_etc_params(P, system, kernels=kernels)
    per_class, coupled = _condition_oracle(P, system)
    for i in range(3):
        assert rep.get(f"varsigma{i + 1}<=A{i + 1}exp(-muL/lambda{i + 1})").passed == per_class[i]
    cond = rep.get("varsigma4+sum(A_i q_i^2)-B<=0")
    assert cond.lhs == pytest.approx(coupled, rel=1e-12)
    assert cond.passed == (coupled <= 0)
    assert rep.epsilon_hat is not None and all(e >= 0 for e in rep.epsilon_hat)
    assert all(c.advisory for c in rep.conditions if "eps" in c.name or "gamma" in c.name)


def test_baseline_trigger_weights_satisfy_design_inequalities(system):
    rep = etc.validate_etc_params(P, system)
    names = [f"varsigma{i + 1}<=A{i + 1}exp(-muL/lambda{i + 1})" for i in range(3)]
    names.append("varsigma4+sum(A_i q_i^2)-B<=0")
    assert all(rep.get(n).passed for n in names), [rep.get(n) for n in names]


def test_violated_per_class_inequality_is_reported(system):
    rep = etc.validate_etc_params(P.with_updates(varsigma=(P.a_coef[0], 2e-9, 1.2e-12, 1e-2)), system)
    assert not rep.get("varsigma1<=A1exp(-muL/lambda1)").passed
    assert not rep.mandatory_ok


def test_zero_b_is_reported(system):
    p = etc.EtcParams()
    object.__setattr__(p, "b_coef", 0.0)   # bypass the constructor guard to reach the report
    rep = etc.validate_etc_params(p, system)
    assert not rep.get("B>0").passed
    assert not rep.mandatory_ok


def test_first_call_fires_with_continuous_value(system, kernels, ic, grid):
    ts = etc.TriggerState.initial(P)
    a, b = forward_transform(ic.w_plus, ic.w_minus, kernels)
    u, applied, fired = etc.etc_step(a, b, ic.w_plus[:, -1], 0.0, ts, kernels, system, P, grid.dt)
    assert fired and ts.event_log == [0.0]
    assert applied == u == pytest.approx(etc.continuous_control(ic, kernels, system), rel=1e-14)
    assert ts.trace[0].d == 0.0


def test_frozen_state_never_triggers_again(system, kernels, ic, grid):
    ts = etc.TriggerState.initial(P)
    a, b = forward_transform(ic.w_plus, ic.w_minus, kernels)
    for k in range(500):
        etc.etc_step(a, b, ic.w_plus[:, -1], k * grid.dt, ts, kernels, system, P, grid.dt)
    assert ts.event_log == [0.0]
    assert all(r.d == 0.0 for r in ts.trace)
    assert all(r.m < 0 for r in ts.trace)
    assert etc.sampled_control(ts) == ts.events[0].u


def test_sampled_control_needs_an_event():
    with pytest.raises(DomainError):
        etc.sampled_control(etc.TriggerState.initial(P))


def test_discrepancy_identity(etc_run, kernels, system):
    traj, ts = etc_run
    for state in traj.states[1:10]:
        direct = ts.held_control - etc.continuous_control(state, kernels, system)
        assert etc.discrepancy(state, ts, kernels, system) == pytest.approx(direct, abs=1e-12)


def trigger_invariants(ts, controls, dt, t_end):
    """Assertions shared by every closed-loop run."""
    trace = ts.trace
    assert all(r.m < 0 for r in trace)
    for r in trace:
        if r.triggered:
            assert r.d == 0.0
        else:
            assert r.margin < 0
    ev = np.array(ts.event_log)
    assert ev.size == 1 or np.min(np.diff(ev)) >= dt * (1 - 1e-9)
    # zero-order hold: bit-identical applied control between events
    for prev, cur in zip(controls, controls[1:]):
        if not cur.triggered:
            assert cur.u_applied == prev.u_applied
    t = np.array([r.t for r in trace])
    vd = np.array([r.V_d for r in trace])
    late = t >= 0.5 * t_end
    slope = np.polyfit(t[late], np.log(vd[late]), 1)[0]
    assert slope < 0


def test_trigger_invariants_on_baseline(etc_run, grid):
    traj, ts = etc_run
    trigger_invariants(ts, traj.controls, grid.dt, grid.t_end)


def test_forced_trigger_reproduces_continuous_law(ic, system, grid, kernels, bs_run):
    hook, ts = etc.etc_controller_hook(kernels, system, P, grid.dt, force_every_step=True)
    forced = sim.run(ic, system, grid, hook)
    assert ts.n_events == grid.n_steps
    for a, b in zip(forced.states, bs_run.states):
        assert sim.l2_norm(a.w - b.w, grid.dx) <= 1e-6


def test_event_and_trace_csv_headers(tmp_path, etc_run):
    ts = etc_run[1]
    ts.write_event_csv(tmp_path / "e.csv")
    ts.write_trace_csv(tmp_path / "t.csv")
    with open(tmp_path / "e.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["event_index", "t_event", "dwell_since_previous", "u_value", "V_at_event", "m_at_event"]
    assert len(rows) == 1 + ts.n_events
    with open(tmp_path / "t.csv") as fh:
        assert next(csv.reader(fh)) == ["t", "V", "m", "V_d", "d"]
