"""Command line entry point.

Exit codes: 0 success, 2 configuration or validation failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .etc import validate_etc_params
from .exceptions import (
    ArzEtcError,
    CalibrationError,
    ConfigError,
    DomainError,
    GridMismatchError,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _exit_code(exc):
    if isinstance(exc, (ConfigError, DomainError, CalibrationError, GridMismatchError)):
        return EXIT_VALIDATION
    return EXIT_NUMERICAL


def _load(args):
    cfg = harness.resolve_config(args.config)
    changes = {}
    if getattr(args, "controller", None):
        changes[("scenario", "controller")] = args.controller
    if getattr(args, "seed", None) is not None:
        changes[("scenario", "seed")] = args.seed
    if getattr(args, "out", None):
        changes[("scenario", "output_dir")] = str(args.out)
    return cfg.with_values(changes) if changes else cfg


def cmd_simulate(args):
    cfg = _load(args)
    res = harness.run_scenario(cfg)
    rep = res.metrics
    out = Path(cfg.get("scenario", "output_dir")) / cfg.name
    norms = res.trajectory.norms()
    ratio = norms[-1] / norms[0] if norms[0] > 0 else float("nan")
    print(f"scenario {cfg.name} ({cfg.controller}) -> {out}")
    print(f"  final/initial L2 norm {ratio:.4g}")
    if res.trigger is not None:
        print(f"  events {rep.trigger_count}, release time {rep.total_release_time:.1f} s")
    print(f"  Lyapunov convergence time {res.convergence_time:.1f} s")
    for k, v in rep.improvement_vs_baseline.items():
        print(f"  {k} {v:+.2f}% vs open loop")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load(args)
    report = harness.run_sweep(cfg, workers=args.workers)
    print(f"sweep over {report.axis} -> {Path(cfg.get('scenario', 'output_dir')) / cfg.name / 'sweep.csv'}")
    for r in report.rows:
        if r.status == "ok":
            print(f"  {report.axis}={r.value}: events {r.trigger_count}, release {r.release_time:.1f} s, "
                  f"V convergence {r.lyapunov_convergence_time:.1f} s")
        else:
            print(f"  {report.axis}={r.value}: FAILED {r.error}")
    return EXIT_NUMERICAL if report.failed() else EXIT_OK


def cmd_regime_map(args):
    cfg = _load(args)
    rh, ra = harness.regime_grid(cfg)
    path = Path(cfg.get("scenario", "output_dir")) / cfg.name / "regime_map.csv"
    rmap = harness.export_regime_map(cfg.model_params(), rh, ra, path)
    tags = list(rmap.tags.ravel())
    print(f"regime map {len(ra)}x{len(rh)} -> {path}")
    for t in sorted(set(tags)):
        print(f"  {t}: {tags.count(t)} cells")
    return EXIT_OK


def cmd_kernels_check(args):
    cfg = _load(args)
    setup = harness.prepare(cfg)
    chk = harness.kernel_check(setup.system, setup.kernels, samples=args.samples,
                               seed=cfg.get("scenario", "seed"))
    for line in chk.lines():
        print(line)
    return EXIT_OK if chk.passes else EXIT_NUMERICAL


def cmd_validate_params(args):
    cfg = _load(args)
    setup = harness.prepare(cfg)
    report = validate_etc_params(cfg.etc_params(), setup.system, setup.equilibrium, setup.kernels)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.mandatory_ok else EXIT_VALIDATION


def build_parser():
    parser = argparse.ArgumentParser(prog="arz-etc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, controller=False):
        p.add_argument("--config", default="paper_baseline",
                       help="scenario file, or the name of a bundled config (default: paper_baseline)")
        p.add_argument("--out", type=Path, help="output root directory (overrides [scenario] output_dir)")
        p.add_argument("--seed", type=int, help="seed for random states")
        if controller:
            p.add_argument("--controller", choices=harness.CONTROLLERS, help="override [scenario] controller")
        return p

    common(sub.add_parser("simulate", help="run one scenario and write its CSVs"), controller=True) \
        .set_defaults(func=cmd_simulate)
    p = common(sub.add_parser("sweep", help="run every value of the [sweep] axis"), controller=True)
    p.add_argument("--workers", type=int, help="concurrent runs (overrides [sweep] workers)")
    p.set_defaults(func=cmd_sweep)
    common(sub.add_parser("regime-map", help="export the free/congested regime map")) \
        .set_defaults(func=cmd_regime_map)
    p = common(sub.add_parser("kernels-check", help="kernel residual and round-trip check"))
    p.add_argument("--samples", type=int, default=50, help="random states for the round trip")
    p.set_defaults(func=cmd_kernels_check)
    common(sub.add_parser("validate-params", help="check the trigger design inequalities")) \
        .set_defaults(func=cmd_validate_params)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ArzEtcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
