import math

import numpy as np
import pytest
from hypothesis import settings

from envar import binormal as bn
from envar import euler_korteweg as ek
from envar.stepper import SolverConfig, run

settings.register_profile("envar", deadline=None, max_examples=40)
settings.load_profile("envar")

EK_HORIZON, EK_STEPS = 0.25, 32


@pytest.fixture(scope="session")
def ek_grid():
    return ek.Grid1D(1.0, 64)


@pytest.fixture(scope="session")
def ek_setup(ek_grid):
    rho0 = 1.0 + 0.1 * np.cos(2 * math.pi * ek_grid.x)
    u0, rho_bar = ek.initial_state(ek_grid, rho0)
    system = ek.make_system(ek_grid, 2.0, rho_bar)
    return system, u0


@pytest.fixture(scope="session")
def ek_run(ek_setup):
    system, u0 = ek_setup
    return run(system, u0, EK_HORIZON, EK_STEPS, solver_cfg=SolverConfig())


@pytest.fixture(scope="session")
def ek_family(ek_setup):
    system, _ = ek_setup
    return ek.test_paths(system, EK_HORIZON, EK_HORIZON / EK_STEPS, 16, 0)


@pytest.fixture(scope="session")
def bn_system():
    fields = bn.null_fields() + bn.vortex_fields(5)
    return bn.make_system(16, fields=fields)


@pytest.fixture(scope="session")
def bn_run(bn_system):
    u0 = bn.TranslatingCircle(1.0).polygon(0.0, 16).vertices.ravel()
    return run(bn_system, u0, 4e-3, 4, solver_cfg=SolverConfig())


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    return pytestconfig.stash.setdefault(ACCEPTANCE_LINES, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
