import numpy as np
import pytest

from radiomap import scenes
from radiomap.scene import OccupancyGrid


@pytest.fixture(scope="session")
def room():
    return scenes.empty_room()


@pytest.fixture(scope="session")
def two_rooms():
    return scenes.two_rooms()


@pytest.fixture(scope="session")
def wall_grid():
    """Open 10 x 10 x 3 m grid (0.25 m voxels) with a full wall plane at x = 5 m."""
    occ = np.zeros((40, 40, 12), dtype=bool)
    occ[20, :, :] = True
    return OccupancyGrid(occ, 0.25, np.zeros(3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
