import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from arz_etc import cli, harness
from arz_etc.etc import validate_etc_params
from arz_etc.exceptions import ConfigError, DomainError
from arz_etc.model import KMH, paper_params


def _short(cfg, extra=None, t_end=40.0):
    ch = {("grid", "t_end"): t_end}
    ch.update(extra or {})
    return cfg.with_values(ch)


def test_bundled_baseline_matches_reference_setup():
    cfg = harness.bundled_config("paper_baseline")
    p = cfg.model_params()
    ref = paper_params()
    for name in ("free_flow_speed_h", "free_flow_speed_a", "gamma_h", "gamma_a", "tau_h", "tau_a",
                 "spacing_h", "spacing_a", "vehicle_width", "road_width", "road_length", "ao_max_h", "ao_max_a"):
        assert getattr(p, name) == pytest.approx(getattr(ref, name), rel=1e-12), name
    assert p.free_flow_speed_h == pytest.approx(80 * KMH)
    eq = cfg.equilibrium(p)
    assert (eq.rho_h_star, eq.rho_a_star) == pytest.approx((0.110, 0.095))
    e = cfg.etc_params()
    assert (e.zeta, e.sigma, e.eta, e.mu, e.b_coef) == (8e-3, 1e-4, 0.9, 5e-4, 9e-3)
    assert e.a_coef == (2e-2, 3e-3, 4e-3) and e.varsigma == (2e-10, 2e-9, 1.2e-12, 1e-2)
    assert cfg.controller == "etc"


def test_empty_file_gives_documented_defaults(tmp_path):
    f = tmp_path / "empty.ini"
    f.write_text("")
    cfg = harness.load_config(f)
    for key in harness.SCHEMA:
        assert cfg.get(key.section, key.name) == key.default


def test_negative_relaxation_time_is_rejected():
    with pytest.raises(ConfigError, match="tau_h"):
        harness.loads_config("[model]\ntau_h = -30\n")


def test_unknown_key_reports_its_line():
    with pytest.raises(ConfigError, match="line 4"):
        harness.loads_config("[model]\ngamma_h = 2.5\n\nbogus = 1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        harness.loads_config("[nonsense]\na = 1\n")


def test_parse_errors_carry_line_info():
    with pytest.raises(ConfigError, match="line"):
        harness.loads_config("[model]\nthis line has no separator\n")
    with pytest.raises(ConfigError, match="line 2"):
        harness.loads_config("[grid]\nnx = ten\n")


def test_invalid_choices_and_sweeps():
    with pytest.raises(ConfigError, match="controller"):
        harness.loads_config("[scenario]\ncontroller = pid\n")
    with pytest.raises(ConfigError, match="axis"):
        harness.loads_config("[sweep]\naxis = rho\nvalues = 1\n")
    with pytest.raises(ConfigError, match="values"):
        harness.loads_config("[sweep]\naxis = mu\n")
    with pytest.raises(ConfigError, match="demand level"):
        harness.loads_config("[sweep]\naxis = demand\nvalues = extreme\n")
    with pytest.raises(ConfigError, match="equilibrium"):
        harness.loads_config("[equilibrium]\nrho_h = 400\nrho_a = 300\n")


def test_dump_round_trip():
    cfg = harness.bundled_config("sensitivity_mu")
    assert harness.loads_config(cfg.dumps()).values == cfg.values


def test_schema_document_lists_every_key():
    doc = harness.schema_document()
    json.dumps(doc)
    for key in harness.SCHEMA:
        assert key.name in doc["properties"][key.section]["properties"]


def test_every_bundled_config_loads():
    names = harness.bundled_configs()
    assert "paper_baseline" in names and "penetration_sweep" in names
    for name in names:
        harness.bundled_config(name)


def test_bundled_configs_satisfy_design_inequalities():
    for name in harness.bundled_configs():
        cfg = harness.bundled_config(name)
        values = cfg.get("sweep", "values") or (None,)
        for v in values:
            c = cfg if v is None else harness.config_for_value(cfg, cfg.sweep_axis, v)
            setup = harness.prepare(c)
            rep = validate_etc_params(c.etc_params(), setup.system)
            failed = [x.name for x in rep.failed() if not x.advisory]
            assert not failed, (name, v, failed)


def test_lyapunov_convergence_time_examples():
    t = np.linspace(0, 10, 11)
    trace = np.column_stack([t, np.exp(-t)])
    assert harness.lyapunov_convergence_time(trace, 1.0, t_end=10) == 0.0
    assert harness.lyapunov_convergence_time(trace, 0.01, t_end=10) == 5.0
    flat = np.column_stack([t, np.ones_like(t)])
    assert harness.lyapunov_convergence_time(flat, 0.5, t_end=450.0) == 450.0


def test_baseline_converges_in_lyapunov_sense():
    res = harness.execute(harness.bundled_config("paper_baseline"))
    assert res.convergence_time < 450.0
    assert res.trigger.n_events == res.metrics.trigger_count


def test_open_loop_scenario_oscillates():
    from arz_etc.sim import deviation_norms

    res = harness.execute(harness.bundled_config("paper_baseline"), controller="open_loop")
    n = deviation_norms(res.trajectory, res.setup.equilibrium)
    assert n[-1] >= 0.5 * n[0]
    assert res.trigger is None


def test_zero_horizon_gives_metrics_window_error():
    cfg = harness.bundled_config("paper_baseline").with_values({("grid", "t_end"): 0.0})
    with pytest.raises(DomainError, match="time samples"):
        harness.execute(cfg)


def test_run_scenario_writes_every_csv(tmp_path):
    cfg = _short(harness.bundled_config("observer_etc"))
    traj, rep = harness.run_scenario(cfg, out_dir=tmp_path)
    out = tmp_path / "observer_etc"
    for name in ("trajectory", "control", "metrics", "lyapunov", "events", "trace", "observer_error"):
        assert (out / f"{name}.csv").exists(), name
    assert rep.trigger_count >= 1 and len(traj.states) > 1


def test_identical_configs_give_identical_files(tmp_path):
    cfg = _short(harness.bundled_config("paper_baseline"))
    harness.run_scenario(cfg, out_dir=tmp_path / "a")
    harness.run_scenario(cfg, out_dir=tmp_path / "b")
    a, b = tmp_path / "a" / "paper_baseline", tmp_path / "b" / "paper_baseline"
    names = sorted(p.name for p in a.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors and len(match) == len(names)


def test_single_value_sweep_matches_run_scenario(tmp_path):
    cfg = _short(harness.bundled_config("paper_baseline"),
                 {("sweep", "axis"): "mu", ("sweep", "values"): ("5e-4",)})
    report = harness.run_sweep(cfg, out_dir=tmp_path)
    single = harness.execute(harness.config_for_value(cfg, "mu", "5e-4"))
    row = report.rows[0]
    assert row.status == "ok"
    assert row.trigger_count == single.metrics.trigger_count
    assert row.indices == single.metrics.indices()
    assert (tmp_path / "paper_baseline" / "sweep.csv").exists()


def test_cache_does_not_change_a_sweep(tmp_path):
    base = _short(harness.bundled_config("penetration_sweep"), {("sweep", "values"): ("0.44", "0.5")})
    plain = harness.run_sweep(base, write=False)
    cached_cfg = base.with_values({("grid", "kernel_cache"): str(tmp_path / "cache")})
    first = harness.run_sweep(cached_cfg, write=False)
    second = harness.run_sweep(cached_cfg, write=False)
    assert len(list((tmp_path / "cache").iterdir())) == 2
    for r0, r1, r2 in zip(plain.rows, first.rows, second.rows):
        assert r0.indices == r1.indices == r2.indices
        assert r0.trigger_count == r1.trigger_count == r2.trigger_count


def test_parallel_sweep_matches_sequential():
    cfg = _short(harness.bundled_config("sensitivity_sigma"))
    seq = harness.run_sweep(cfg, workers=1, write=False)
    par = harness.run_sweep(cfg, workers=2, write=False)
    assert [r.indices for r in seq.rows] == [r.indices for r in par.rows]


def test_failed_sweep_run_is_recorded_and_sweep_continues():
    # the smallest spacing leaves the congested regime, so its kernels cannot be designed
    cfg = _short(harness.bundled_config("spacing_sweep"), {("sweep", "values"): ("15", "1")})
    report = harness.run_sweep(cfg, write=False)
    assert report.rows[0].status == "ok"
    assert report.rows[1].status == "failed" and report.rows[1].error


def test_regime_map_export(tmp_path):
    cfg = harness.bundled_config("paper_baseline")
    rh, ra = harness.regime_grid(cfg)
    path = tmp_path / "r.csv"
    rmap = harness.export_regime_map(cfg.model_params(), rh, ra, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "rho_h,rho_a,lambda4,regime"
    assert len(lines) == 1 + rh.size * ra.size
    tags = set(rmap.tags.ravel())
    assert {"free", "congested"} <= tags
    cell = harness.export_regime_map(cfg.model_params(), [0.110], [0.095], tmp_path / "one.csv")
    assert cell.tags[0, 0] == "congested"


def test_kernel_check_passes_on_baseline():
    setup = harness.prepare(harness.bundled_config("paper_baseline"))
    chk = harness.kernel_check(setup.system, setup.kernels, samples=10, seed=3)
    assert chk.passes and chk.samples == 10


@pytest.mark.parametrize("argv, code", [
    (["kernels-check", "--samples", "5"], 0),
    (["validate-params", "--config", "paper_baseline"], 2),
])
def test_cli_exit_codes(argv, code, capsys):
    assert cli.main(argv) == code
    assert capsys.readouterr().out


def test_cli_simulate_and_config_errors(tmp_path, capsys):
    cfg = tmp_path / "short.ini"
    cfg.write_text("[grid]\nt_end = 20\n[scenario]\nname = short\n")
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path), "--controller",
                     "backstepping", "--seed", "7"]) == 0
    assert (tmp_path / "short" / "metrics.csv").exists()
    assert "seed = 7" in (tmp_path / "short" / "config.ini").read_text()
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\ntau_h = -1\n")
    assert cli.main(["simulate", "--config", str(bad)]) == 2
    assert "tau_h" in capsys.readouterr().err
    unstable = tmp_path / "unstable.ini"
    unstable.write_text("[grid]\nt_end = 10\ndt = 5\n")
    assert cli.main(["simulate", "--config", str(unstable), "--out", str(tmp_path)]) == 3


def test_cli_regime_map_and_sweep(tmp_path):
    assert cli.main(["regime-map", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "paper_baseline" / "regime_map.csv").exists()
    cfg = tmp_path / "sw.ini"
    cfg.write_text("[scenario]\nname = sw\n[grid]\nt_end = 20\n[sweep]\naxis = zeta\nvalues = 1e-3, 8e-3\n")
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path), "--workers", "2"]) == 0
    assert len((tmp_path / "sw" / "sweep.csv").read_text().splitlines()) == 3
