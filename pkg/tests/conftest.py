import numpy as np
import pytest

from tcmf.mfsde import EnsembleConfig
from tcmf.noise import IntensityModel, LevyGrid, TimeGrid, discretize_levy

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def grid():
    return TimeGrid(1.0, 50)


@pytest.fixture
def jumps():
    return discretize_levy("uniform", M=2, eps=0.1, a=1.0, c=2.0)


@pytest.fixture
def small_config(grid, jumps):
    return EnsembleConfig(grid, IntensityModel.constant(1.0, 1.5), jumps, N=400, seed=11)


@pytest.fixture
def gauss_config(grid):
    return EnsembleConfig(grid, IntensityModel.constant(1.0, 0.0), LevyGrid.empty(), N=400, seed=5)


def rel(a, b):
    return np.abs(np.asarray(a) - np.asarray(b)) / np.maximum(np.abs(np.asarray(b)), 1e-300)
