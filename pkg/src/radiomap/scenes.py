"""Procedural desk-scale scenes used by tests, acceptance runs and the CLI.

Every scene is a closed box: a one-voxel floor, ceiling and outer wall at
the grid boundary, plus interior walls built from axis-aligned boxes.
Interior walls default to two voxels thick so each face forms its own
surface.
"""

from __future__ import annotations

import numpy as np

from .scene import OccupancyGrid


class SceneBuilder:
    def __init__(self, size, resolution=0.25, height=3.0, closed=True):
        self.resolution = float(resolution)
        self.dims = tuple(int(round(s / self.resolution)) for s in (size[0], size[1], height))
        self.occ = np.zeros(self.dims, dtype=bool)
        if closed:
            self.occ[0, :, :] = self.occ[-1, :, :] = True
            self.occ[:, 0, :] = self.occ[:, -1, :] = True
            self.occ[:, :, 0] = self.occ[:, :, -1] = True

    def _idx(self, x, axis):
        return int(round(x / self.resolution))

    def box(self, lo, hi, value=True):
        """Fill the world-space box [lo, hi) (meters, snapped to voxels)."""
        sl = tuple(slice(max(0, self._idx(a, k)), max(0, self._idx(b, k)))
                   for k, (a, b) in enumerate(zip(lo, hi)))
        self.occ[sl] = value
        return self

    def wall_x(self, x, y0, y1, thickness=0.5, z0=0.0, z1=None):
        """Wall normal to x spanning y in [y0, y1)."""
        z1 = self.dims[2] * self.resolution if z1 is None else z1
        return self.box((x, y0, z0), (x + thickness, y1, z1))

    def wall_y(self, y, x0, x1, thickness=0.5, z0=0.0, z1=None):
        z1 = self.dims[2] * self.resolution if z1 is None else z1
        return self.box((x0, y, z0), (x1, y + thickness, z1))

    def opening(self, lo, hi):
        return self.box(lo, hi, value=False)

    def build(self) -> OccupancyGrid:
        return OccupancyGrid(self.occ, self.resolution, np.zeros(3))


def empty_room(size=(4.5, 4.5), height=3.5, resolution=0.25) -> OccupancyGrid:
    return SceneBuilder(size, resolution, height).build()


def two_rooms(size=(10.0, 5.0), height=3.0, resolution=0.25, door=None) -> OccupancyGrid:
    """Two rooms split by a wall at mid-x; ``door`` = (y0, y1) opens it."""
    b = SceneBuilder(size, resolution, height)
    xm = size[0] / 2 - 0.25
    b.wall_x(xm, 0, size[1])
    if door is not None:
        b.opening((xm, door[0], resolution), (xm + 0.5, door[1], 2.25))
    return b.build()


def l_corridor(arm=9.0, width=2.0, height=3.0, resolution=0.25) -> OccupancyGrid:
    """L-shaped corridor: one arm along +x, one along +y, meeting at the origin corner."""
    size = (arm + 0.5, arm + 0.5)
    b = SceneBuilder(size, resolution, height)
    w = width + 0.25
    b.box((w, w, 0), (size[0], size[1], height))
    return b.build()


def two_rooms_corridor(resolution=0.25, height=3.0) -> OccupancyGrid:
    """~20 x 10 x 3 m: a corridor along y in [0.25, 3] and two rooms above it.

    The rooms span y in [3.5, 9.75] and split at x = 10; each has a door to
    the corridor and there is a connecting door between them.
    """
    b = SceneBuilder((20.0, 10.0), resolution, height)
    b.wall_y(3.0, 0, 20.0)
    b.wall_x(9.75, 3.0, 10.0)
    b.opening((3.0, 3.0, resolution), (4.25, 3.5, 2.25))
    b.opening((15.0, 3.0, resolution), (16.25, 3.5, 2.25))
    b.opening((9.75, 7.5, resolution), (10.25, 8.75, 2.25))
    return b.build()


def random_rooms(seed: int, size=(12.0, 8.0), height=3.0, resolution=0.25) -> OccupancyGrid:
    """Random floorplan: a few interior walls, each with a random door or none."""
    rng = np.random.default_rng(seed)
    b = SceneBuilder(size, resolution, height)
    nwalls = int(rng.integers(1, 4))
    for _ in range(nwalls):
        if rng.random() < 0.5:
            x = float(rng.integers(8, int(size[0] / resolution) - 10)) * resolution
            b.wall_x(x, 0, size[1])
            if rng.random() < 0.7:
                y0 = float(rng.integers(2, int(size[1] / resolution) - 7)) * resolution
                b.opening((x, y0, resolution), (x + 0.5, y0 + 1.0, 2.25))
        else:
            y = float(rng.integers(8, int(size[1] / resolution) - 10)) * resolution
            b.wall_y(y, 0, size[0])
            if rng.random() < 0.7:
                x0 = float(rng.integers(2, int(size[0] / resolution) - 7)) * resolution
                b.opening((x0, y, resolution), (x0 + 1.0, y + 0.5, 2.25))
    for _ in range(int(rng.integers(0, 3))):
        c = rng.uniform([1.0, 1.0], [size[0] - 2.0, size[1] - 2.0])
        b.box((c[0], c[1], 0.0), (c[0] + 0.75, c[1] + 0.75, 1.0))
    return b.build()
