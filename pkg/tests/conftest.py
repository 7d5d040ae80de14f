import numpy as np
import pytest

from accbound.geometry import adjoint_along, reference_trajectory
from accbound.presets import chain_n3, const4, martinet
from accbound.secondvar import hessian_form

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def martinet_preset():
    return martinet(alpha=1.0)


@pytest.fixture(scope="session")
def martinet_traj(martinet_preset):
    traj = reference_trajectory(martinet_preset.system, martinet_preset.x0, 1.0, 1600)
    return adjoint_along(traj, martinet_preset.system)


@pytest.fixture(scope="session")
def martinet_qfd(martinet_preset, martinet_traj):
    return hessian_form(martinet_traj, martinet_preset.system, 200)


@pytest.fixture(scope="session")
def const4_preset():
    return const4()


@pytest.fixture(scope="session")
def chain3_preset():
    return chain_n3(b=0.5)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260810)
