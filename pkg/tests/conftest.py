import numpy as np
import pytest

from app.services.model import ModelParams, PhaseState
from app.services.scheme import SchemeParams
from app.services.tension import SurfaceTensions
from app.utils.grid_field import Grid2D, ScalarField


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run experiment-scale tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    """Seeded generator so random fields are reproducible."""
    return np.random.default_rng(12345)


@pytest.fixture
def grid():
    return Grid2D(33, 33)


@pytest.fixture
def tensions():
    return SurfaceTensions.ternary(1.0, 1.0, 1.0)


@pytest.fixture
def params(tensions):
    """Ternary parameters sized for 33x33 grids."""
    return ModelParams.create(0.05, tensions, mobility=1e-3)


@pytest.fixture
def scheme():
    """Stabilisers large enough to satisfy the stability condition for tensions up to 2."""
    return SchemeParams(tau=0.01, a1=1000.0, a2=1000.0, b1=1000.0, b2=1000.0, solver_tol=1e-11)


@pytest.fixture
def smooth_state(grid):
    """A ternary state with all three phases present and fields strictly inside (-1, 1)."""
    xx, yy = grid.coordinates()
    psi = 0.6 * np.sin(2 * np.pi * xx) * np.cos(np.pi * yy) + 0.1
    phi = 0.7 * np.cos(np.pi * xx) * np.sin(np.pi * yy + 0.3)
    return PhaseState((ScalarField(grid, psi), ScalarField(grid, phi)))


def constant_state(grid: Grid2D, *values: float) -> PhaseState:
    return PhaseState(tuple(ScalarField.constant(grid, v) for v in values))
