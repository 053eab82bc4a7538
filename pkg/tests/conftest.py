"""Shared fixtures: the baseline road and its closed-loop runs are built once per session."""

from dataclasses import replace

import numpy as np
import pytest

from arz_etc import etc, sim
from arz_etc.kernels import solve_kernels
from arz_etc.model import PER_KM, compute_equilibrium, linearize, paper_params


@pytest.fixture(scope="session")
def params():
    return paper_params()


@pytest.fixture(scope="session")
def eq(params):
    return compute_equilibrium(110 * PER_KM, 95 * PER_KM, params)


@pytest.fixture(scope="session")
def system(eq, params):
    return linearize(eq, params, nx=100)


@pytest.fixture(scope="session")
def kernels(system):
    return solve_kernels(system)


@pytest.fixture(scope="session")
def grid(system):
    return sim.make_grid(system)


@pytest.fixture(scope="session")
def ic(eq, system, grid):
    return sim.make_initial_condition("sinusoidal", eq, system, grid)


@pytest.fixture(scope="session")
def open_run(ic, system, grid, eq):
    return sim.run(ic, system, grid, None, eq=eq)


@pytest.fixture(scope="session")
def bs_run(ic, system, grid, eq, kernels):
    return sim.run(ic, system, grid, etc.backstepping_hook(kernels, system), eq=eq)


@pytest.fixture(scope="session")
def etc_run(ic, system, grid, eq, kernels):
    hook, ts = etc.etc_controller_hook(kernels, system, etc.EtcParams(), grid.dt)
    return sim.run(ic, system, grid, hook, eq=eq), ts


def decoupled(system, q_zero=True, r_zero=True):
    """Copy of ``system`` with every coupling removed (and optionally Q, R zeroed)."""
    jhat = np.diag(np.diag(system.jhat))
    out = replace(system, jhat=jhat, _cache={})
    if q_zero:
        out = replace(out, q_bc=np.zeros(3))
    if r_zero:
        out = replace(out, r_bc=np.zeros(3))
    return out


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
