import numpy as np
import pytest

from superct.geometry import FanBeamGeometry, ImageGrid, build_system_matrix
from superct.presets import desk_scan

from helpers import ACCEPTANCE_LINES


@pytest.fixture(scope="session")
def desk():
    """64x64 grid, 128 detectors x 120 views, and its system matrix."""
    grid, geometry = desk_scan()
    return grid, geometry, build_system_matrix(geometry, grid)


@pytest.fixture(scope="session")
def toy():
    """8x8 grid with more rays than pixels (full-rank normal equations)."""
    grid = ImageGrid(8, 8, 1.0)
    geometry = FanBeamGeometry(16, 12, 0.75, mode="parallel")
    return grid, geometry, build_system_matrix(geometry, grid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[0][2:])):
            terminalreporter.write_line(line)
