import numpy as np
import pytest

from fingerwave.tw_scheme import Discretization, Params, fixed_point_solve

SMALL = dict(nx=32, nz=32)


@pytest.fixture(scope="session")
def small_params():
    return Params(c=0.04, **SMALL)


@pytest.fixture(scope="session")
def small_disc(small_params):
    return Discretization(small_params)


@pytest.fixture(scope="session")
def small_solution(small_params, small_disc):
    sol = fixed_point_solve(small_params, disc=small_disc)
    assert sol.converged
    return sol


@pytest.fixture(scope="session")
def constant_params():
    base = Params(nx=8, nz=8, delta=0.0, s0_base=0.5)
    k0 = float(base.constitutive.eval_k(0.5))
    return base.replace(F_inf=base.g * k0 * base.L, p_init=0.5, s_init=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
