import numpy as np
import pytest

from hardylab.operator import build_operator, spectral_decompose
from hardylab.space import build_grid_space


def line(count, spacing=1.0, start=0.0):
    """Points start, start + spacing, ... with unit-free spacing."""
    return build_grid_space(1, count * spacing, count, origin=start - spacing / 2)


def harmonic(count=128, extent=16.0, m=2, omega=1.0):
    space = build_grid_space(1, extent, count, origin=-extent / 2)
    A = build_operator(space, "schrodinger", potential={"name": "harmonic", "omega": omega})
    return spectral_decompose(A, space, m)


def heat(count=128, extent=16.0, boundary="dirichlet", m=2):
    space = build_grid_space(1, extent, count, origin=-extent / 2)
    return spectral_decompose(build_operator(space, "laplacian", boundary), space, m)


@pytest.fixture(scope="session")
def ho128():
    return harmonic(128)


@pytest.fixture(scope="session")
def heat128():
    return heat(128)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
