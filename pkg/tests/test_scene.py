import base64
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radiomap.errors import DomainError, MalformedInputError, StructuralError
from radiomap.scene import (
    OccupancyGrid, extract_surface_voxels, grid_from_json_dict, load_scene,
    mutually_visible, raycast, voxelize_point_cloud,
)


def _bits_payload(bits: str) -> str:
    return base64.b64encode(np.packbits(np.array([int(c) for c in bits], dtype=np.uint8)).tobytes()).decode()


class TestLoadScene:
    def test_occupancy_json_decodes_bits(self, tmp_path):
        p = tmp_path / "s.json"
        p.write_text(json.dumps({"dims": [2, 2, 1], "resolution": 0.5, "origin": [0, 0, 0],
                                 "occupancy": _bits_payload("1010")}))
        g = load_scene(p)
        assert g.dims == (2, 2, 1)
        assert g.occupied_count == 2
        # x varies fastest: bits are (0,0) (1,0) (0,1) (1,1)
        assert g.occupancy[0, 0, 0] and not g.occupancy[1, 0, 0]
        assert g.occupancy[0, 1, 0] and not g.occupancy[1, 1, 0]

    def test_round_trip(self, tmp_path, two_rooms):
        p = tmp_path / "g.json"
        two_rooms.save(p)
        g = load_scene(p)
        np.testing.assert_array_equal(g.occupancy, two_rooms.occupancy)
        assert g.resolution == two_rooms.resolution
        np.testing.assert_array_equal(g.origin, two_rooms.origin)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.json"
        p.write_text("")
        with pytest.raises(MalformedInputError):
            load_scene(p)

    def test_bad_json_names_line(self, tmp_path):
        p = tmp_path / "b.json"
        p.write_text('{\n"dims": [1,1,1],\n"resolution": ,\n}')
        with pytest.raises(MalformedInputError, match="line 3"):
            load_scene(p)

    def test_missing_field_is_named(self):
        with pytest.raises(MalformedInputError, match="occupancy"):
            grid_from_json_dict({"dims": [1, 1, 1], "resolution": 1.0})

    def test_payload_length_mismatch(self):
        with pytest.raises(StructuralError):
            grid_from_json_dict({"dims": [4, 4, 4], "resolution": 1.0, "occupancy": _bits_payload("1010")})

    def test_csv_cube_matches_voxelizer(self, tmp_path):
        corners = [(x, y, z) for x in (0, 1) for y in (0, 1) for z in (0, 1)]
        p = tmp_path / "cube.csv"
        p.write_text("x,y,z\n" + "\n".join(f"{x},{y},{z}" for x, y, z in corners))
        g = load_scene(p, resolution=0.5)
        ref = voxelize_point_cloud(np.array(corners, dtype=float), 0.5)
        np.testing.assert_array_equal(g.occupancy, ref.occupancy)
        # 2 interior voxels per axis + padding; corners land in the 8 corner cells
        assert g.dims == (4, 4, 4)
        expect = {(i, j, k) for i in (1, 2) for j in (1, 2) for k in (1, 2)}
        assert {tuple(v) for v in np.argwhere(g.occupancy)} == expect

    def test_csv_bad_field_names_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("0,0,0\n1,abc,2\n")
        with pytest.raises(MalformedInputError, match="line 2"):
            load_scene(p)


class TestVoxelize:
    def test_single_point(self):
        g = voxelize_point_cloud([(0, 0, 0)], 1.0)
        assert g.dims == (3, 3, 3)
        assert g.occupied_count == 1
        assert g.occupancy[1, 1, 1]

    def test_two_points_ten_apart(self):
        g = voxelize_point_cloud([(0, 0, 0), (10, 0, 0)], 1.0)
        assert g.dims[0] == 12
        assert g.occupied_count == 2

    def test_colocated(self):
        g = voxelize_point_cloud([(0.1, 0, 0), (0.9, 0, 0)], 1.0)
        assert g.occupied_count == 1

    def test_non_finite_reports_index(self):
        with pytest.raises(DomainError, match="index 2"):
            voxelize_point_cloud([(0, 0, 0), (1, 1, 1), (np.nan, 0, 0)], 1.0)

    def test_rejects_bad_resolution(self):
        with pytest.raises(DomainError):
            voxelize_point_cloud([(0, 0, 0)], 0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(*[st.floats(-20, 20)] * 3), min_size=1, max_size=30),
           st.sampled_from([0.25, 0.5, 1.0]))
    def test_every_point_lands_in_occupied_voxel(self, pts, res):
        g = voxelize_point_cloud(pts, res)
        arr = np.array(pts)
        # points on the upper face of the box belong to the last interior voxel
        upper = g.origin + (np.array(g.dims) - 1) * res
        arr = np.minimum(arr, upper - 1e-9 * res)
        assert g.occupied_mask(arr).all()
        # padding layer is always free
        occ = g.occupancy
        assert not (occ[0].any() or occ[-1].any() or occ[:, 0].any() or occ[:, -1].any()
                    or occ[:, :, 0].any() or occ[:, :, -1].any())


class TestRaycast:
    def test_origin_inside_occupied(self, wall_grid):
        h = raycast(wall_grid, (5.1, 2, 1), (1, 0, 0))
        assert h is not None and h.distance == 0

    def test_wall_plane(self, wall_grid):
        h = raycast(wall_grid, (2, 2, 1), (1, 0, 0))
        assert h is not None
        assert 5.0 <= h.point[0] <= 5.0 + wall_grid.resolution
        assert h.distance == pytest.approx(3.0, abs=1e-9)
        assert wall_grid.occupancy[h.voxel]

    def test_empty_grid_never_hits(self, rng):
        g = OccupancyGrid(np.zeros((8, 8, 8), dtype=bool), 0.5, np.zeros(3))
        for d in rng.normal(size=(20, 3)):
            assert raycast(g, (2, 2, 2), d / np.linalg.norm(d)) is None

    def test_max_dist(self, wall_grid):
        assert raycast(wall_grid, (2, 2, 1), (1, 0, 0), max_dist=2.5) is None

    def test_origin_out_of_bounds(self, wall_grid):
        with pytest.raises(DomainError):
            raycast(wall_grid, (-1, 2, 1), (1, 0, 0))

    def test_dir_must_be_unit(self, wall_grid):
        with pytest.raises(DomainError):
            raycast(wall_grid, (2, 2, 1), (2, 0, 0))

    def test_hit_properties(self, two_rooms, rng):
        g = two_rooms
        lo, hi = g.bounds_min + 0.3, g.bounds_max - 0.3
        done = 0
        while done < 100:
            o = rng.uniform(lo, hi)
            if g.is_occupied(o):
                continue
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            h = raycast(g, o, d, max_dist=8.0)
            if h is None:
                continue
            done += 1
            assert 0 <= h.distance <= 8.0
            assert g.occupancy[h.voxel]
            back = o + max(h.distance - 1e-3, 0) * d
            h2 = raycast(g, back, d, max_dist=1.0)
            assert h2 is not None and h2.voxel == h.voxel


class TestVisibility:
    def test_same_point(self, wall_grid):
        assert mutually_visible(wall_grid, (2, 2, 1), (2, 2, 1))

    def test_across_wall(self, wall_grid):
        assert not mutually_visible(wall_grid, (2, 2, 1), (8, 2, 1))

    def test_same_room(self, wall_grid):
        assert mutually_visible(wall_grid, (1, 1, 1), (4, 9, 2.5))

    def test_surface_points_do_not_self_occlude(self):
        # two voxel centers on the same face of a two-voxel-thick wall
        occ = np.zeros((40, 40, 12), dtype=bool)
        occ[20:22] = True
        g = OccupancyGrid(occ, 0.25, np.zeros(3))
        a = g.voxel_center((20, 4, 4))
        b = g.voxel_center((20, 30, 6))
        assert mutually_visible(g, a, b)

    def test_symmetry(self, two_rooms, rng):
        g = two_rooms
        pts = rng.uniform(g.bounds_min, g.bounds_max, (300, 3))
        for a, b in zip(pts[::2], pts[1::2]):
            assert mutually_visible(g, a, b) == mutually_visible(g, b, a)


class TestSurface:
    def test_solid_block(self):
        occ = np.zeros((7, 7, 7), dtype=bool)
        occ[2:5, 2:5, 2:5] = True
        g = OccupancyGrid(occ, 1.0, np.zeros(3))
        s = extract_surface_voxels(g)
        assert len(s) == 26
        assert (3, 3, 3) not in s

    def test_free_grid(self):
        assert extract_surface_voxels(OccupancyGrid(np.zeros((3, 3, 3), dtype=bool), 1.0, np.zeros(3))) == set()

    def test_single_voxel(self):
        occ = np.zeros((3, 3, 3), dtype=bool)
        occ[1, 1, 1] = True
        assert extract_surface_voxels(OccupancyGrid(occ, 1.0, np.zeros(3))) == {(1, 1, 1)}

    def test_convex_solid_only_boundary(self):
        # voxelize a dense ball and brute-force the neighbor rule
        r = np.linspace(-2, 2, 41)
        pts = np.array([(x, y, z) for x in r for y in r for z in r if x * x + y * y + z * z <= 4])
        g = voxelize_point_cloud(pts, 0.5)
        s = extract_surface_voxels(g)
        occ = g.occupancy
        for v in np.argwhere(occ):
            nbs = [v + d for d in np.vstack([np.eye(3, dtype=int), -np.eye(3, dtype=int)])]
            has_free = any(np.all(nb >= 0) and np.all(nb < occ.shape) and not occ[tuple(nb)] for nb in nbs)
            assert (tuple(v) in s) == has_free


def test_grid_invariants():
    with pytest.raises(DomainError):
        OccupancyGrid(np.zeros((2, 2, 2), dtype=bool), -1.0, np.zeros(3))
    g = OccupancyGrid(np.zeros((4, 4, 4), dtype=bool), 0.5, np.array([1.0, 1.0, 1.0]))
    assert g.voxel_of((1.0, 1.0, 1.0)) == (0, 0, 0)
    assert g.voxel_of((2.99, 2.99, 2.99)) == (3, 3, 3)
    assert g.voxel_of((3.0, 1.5, 1.5)) is None
    assert not g.in_bounds((0.99, 1.5, 1.5))
    assert math.isclose(g.bounds_max[0], 3.0)
