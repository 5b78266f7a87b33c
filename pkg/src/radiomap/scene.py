"""Voxel scenes: ingestion, voxelization, raycasting and visibility.

Positions are plain length-3 float arrays in meters. Voxel ``(i, j, k)``
covers ``origin + [i, i+1) * resolution`` along each axis; the occupancy
array is indexed ``occupancy[i, j, k]``.
"""

from __future__ import annotations

import base64
import binascii
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import kernels
from .errors import DomainError, MalformedInputError, StructuralError

DEFAULT_RESOLUTION = 0.25

_NEIGHBORS6 = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.int64
)


def as_vec3(p: ArrayLike, name: str = "point") -> NDArray[np.float64]:
    v = np.asarray(p, dtype=np.float64).reshape(-1)
    if v.shape != (3,):
        raise DomainError(f"{name} must have 3 components, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DomainError(f"{name} has non-finite components: {v.tolist()}")
    return v


@dataclass(frozen=True)
class Hit:
    point: NDArray[np.float64]
    distance: float
    voxel: tuple[int, int, int]


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Dense boolean voxel lattice. Immutable once built."""

    occupancy: NDArray[np.bool_]
    resolution: float
    origin: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.ndim != 3 or min(occ.shape) < 1:
            raise StructuralError(f"occupancy must be a non-empty 3D array, got {occ.shape}")
        if not (self.resolution > 0 and math.isfinite(self.resolution)):
            raise DomainError(f"resolution must be positive, got {self.resolution}")
        occ = occ.copy()
        occ.setflags(write=False)
        origin = as_vec3(self.origin, "origin").copy()
        origin.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "resolution", float(self.resolution))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.occupancy.shape)  # type: ignore[return-value]

    @property
    def bounds_min(self) -> NDArray[np.float64]:
        return self.origin

    @property
    def bounds_max(self) -> NDArray[np.float64]:
        return self.origin + np.array(self.dims) * self.resolution

    @cached_property
    def occ_u8(self) -> NDArray[np.uint8]:
        return np.ascontiguousarray(self.occupancy, dtype=np.uint8)

    @cached_property
    def occupied_count(self) -> int:
        return int(self.occupancy.sum())

    def to_grid(self, points: ArrayLike) -> NDArray[np.float64]:
        return (np.asarray(points, dtype=np.float64) - self.origin) / self.resolution

    def voxel_of(self, p: ArrayLike) -> tuple[int, int, int] | None:
        g = np.floor(self.to_grid(as_vec3(p))).astype(int)
        if np.any(g < 0) or np.any(g >= self.dims):
            return None
        return (int(g[0]), int(g[1]), int(g[2]))

    def voxels_of(self, points: ArrayLike) -> NDArray[np.int64]:
        """Voxel indices of many points; clamped into the grid."""
        g = np.floor(self.to_grid(points)).astype(np.int64)
        return np.clip(g, 0, np.array(self.dims) - 1)

    def voxel_center(self, idx: ArrayLike) -> NDArray[np.float64]:
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.resolution

    def in_bounds(self, p: ArrayLike) -> bool:
        v = np.asarray(p, dtype=np.float64)
        return bool(np.all(v >= self.bounds_min) and np.all(v <= self.bounds_max))

    def is_occupied(self, p: ArrayLike) -> bool:
        """True if ``p`` lies in an occupied voxel; out of bounds counts as free."""
        vox = self.voxel_of(p)
        return vox is not None and bool(self.occupancy[vox])

    def occupied_mask(self, points: ArrayLike) -> NDArray[np.bool_]:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        g = np.floor(self.to_grid(pts)).astype(np.int64)
        inside = np.all((g >= 0) & (g < np.array(self.dims)), axis=1)
        out = np.zeros(len(pts), dtype=bool)
        gi = g[inside]
        out[inside] = self.occupancy[gi[:, 0], gi[:, 1], gi[:, 2]]
        return out

    def clamp_inside(self, points: ArrayLike) -> NDArray[np.float64]:
        eps = 1e-9 * self.resolution
        return np.clip(np.asarray(points, dtype=np.float64), self.bounds_min + eps,
                       self.bounds_max - eps)

    def normal_at(self, voxel: Sequence[int]) -> NDArray[np.float64]:
        """Outward normal of a voxel: mean direction of its free in-bounds 6-neighbors.

        Zero when the voxel is free, fully enclosed, or free on opposite sides.
        """
        v = np.asarray(voxel, dtype=np.int64)
        acc = np.zeros(3)
        for d in _NEIGHBORS6:
            nb = v + d
            if np.all(nb >= 0) and np.all(nb < self.dims) and not self.occupancy[tuple(nb)]:
                acc += d
        norm = np.linalg.norm(acc)
        return acc / norm if norm > 0 else acc

    # -- serialization ---------------------------------------------------

    def to_json_dict(self) -> dict:
        bits = np.packbits(self.occupancy.transpose(2, 1, 0).ravel().astype(np.uint8))
        return {
            "dims": list(self.dims),
            "resolution": self.resolution,
            "origin": [float(x) for x in self.origin],
            "occupancy": base64.b64encode(bits.tobytes()).decode("ascii"),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict()))


# -- ingestion ---------------------------------------------------------------

def grid_from_json_dict(data: dict) -> OccupancyGrid:
    try:
        dims = [int(x) for x in data["dims"]]
        resolution = float(data["resolution"])
        origin = [float(x) for x in data.get("origin", [0.0, 0.0, 0.0])]
        payload = data["occupancy"]
    except KeyError as exc:
        raise MalformedInputError(f"occupancy-json: missing field {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise MalformedInputError(f"occupancy-json: bad field value ({exc})") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise StructuralError(f"occupancy-json: dims must be 3 positive ints, got {dims}")
    if len(origin) != 3:
        raise MalformedInputError("occupancy-json: field 'origin' must have 3 components")
    if not isinstance(payload, str):
        raise MalformedInputError("occupancy-json: field 'occupancy' must be a base64 string")
    try:
        raw = base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise MalformedInputError(f"occupancy-json: field 'occupancy' is not base64 ({exc})") from exc
    nbits = dims[0] * dims[1] * dims[2]
    if len(raw) != (nbits + 7) // 8:
        raise StructuralError(
            f"occupancy-json: dims {dims} need {(nbits + 7) // 8} bytes, payload has {len(raw)}"
        )
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:nbits].astype(bool)
    occ = bits.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    return OccupancyGrid(occ, resolution, np.array(origin))


def _read_xyz_csv(text: str) -> NDArray[np.float64]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise MalformedInputError(f"xyz-csv line {lineno}: expected 3 fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            if not rows and lineno == 1 or (not rows and all(p.isalpha() for p in parts)):
                continue  # header
            raise MalformedInputError(f"xyz-csv line {lineno}: non-numeric field in {line!r}")
    if not rows:
        raise MalformedInputError("xyz-csv: no points")
    return np.array(rows)


def load_scene(path: str | Path, format: str | None = None,
               resolution: float = DEFAULT_RESOLUTION) -> OccupancyGrid:
    """Load a scene file as an occupancy grid.

    ``format`` is ``"occupancy-json"`` or ``"xyz-csv"``; when omitted it is
    inferred from the extension. ``resolution`` only applies to point clouds.
    """
    path = Path(path)
    if format is None:
        format = "xyz-csv" if path.suffix.lower() in (".csv", ".xyz") else "occupancy-json"
    text = path.read_text()
    if not text.strip():
        raise MalformedInputError(f"{path}: empty file")
    if format == "occupancy-json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedInputError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise MalformedInputError(f"{path}: top-level JSON value must be an object")
        return grid_from_json_dict(data)
    if format == "xyz-csv":
        return voxelize_point_cloud(_read_xyz_csv(text), resolution)
    raise DomainError(f"unknown scene format {format!r}")


def voxelize_point_cloud(points: Iterable[ArrayLike], resolution: float) -> OccupancyGrid:
    """Occupancy grid over the padded bounding box of a point cloud.

    The box spans ``ceil(extent / resolution)`` voxels per axis (at least one)
    plus one padding voxel on each side. Points on the upper face of the box
    fall into the last interior voxel.
    """
    if not resolution > 0:
        raise DomainError(f"resolution must be positive, got {resolution}")
    pts = np.asarray(list(points) if not isinstance(points, np.ndarray) else points,
                     dtype=np.float64)
    if pts.size == 0:
        raise DomainError("point cloud is empty")
    pts = pts.reshape(-1, 3)
    bad = ~np.all(np.isfinite(pts), axis=1)
    if bad.any():
        raise DomainError(f"non-finite point at index {int(np.flatnonzero(bad)[0])}")
    lo = pts.min(axis=0)
    span = pts.max(axis=0) - lo
    interior = np.maximum(1, np.ceil(span / resolution - 1e-9).astype(np.int64))
    idx = np.floor((pts - lo) / resolution).astype(np.int64)
    idx = np.clip(idx, 0, interior - 1) + 1
    occ = np.zeros(tuple(interior + 2), dtype=bool)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return OccupancyGrid(occ, resolution, lo - resolution)


# -- rays --------------------------------------------------------------------

def raycast_many(grid: OccupancyGrid, origins: ArrayLike, dirs: ArrayLike,
                 max_dist: float | ArrayLike = np.inf):
    """Batch raycast. Returns ``(hit, distance, voxel)`` arrays.

    ``distance`` is the hit distance where ``hit`` is true, otherwise the
    distance at which the ray left the grid or reached ``max_dist``.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if o.shape[0] == 1 and d.shape[0] > 1:
        o = np.repeat(o, d.shape[0], axis=0)
    tmax = np.broadcast_to(np.asarray(max_dist, dtype=np.float64), (d.shape[0],))
    tmax_g = np.ascontiguousarray(np.minimum(tmax / grid.resolution, 1e18))
    g = np.ascontiguousarray(grid.to_grid(o))
    hit, t, vox, _ = kernels.raycast_batch(grid.occ_u8, g, np.ascontiguousarray(d), tmax_g)
    return hit, t * grid.resolution, vox


def raycast(grid: OccupancyGrid, origin: ArrayLike, dir: ArrayLike,
            max_dist: float = math.inf) -> Hit | None:
    """First occupied voxel along a ray, by exact voxel traversal."""
    o = as_vec3(origin, "origin")
    d = as_vec3(dir, "dir")
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise DomainError(f"dir must be unit length, |dir| = {np.linalg.norm(d)!r}")
    if not grid.in_bounds(o):
        raise DomainError(f"ray origin {o.tolist()} is outside the grid bounds")
    hit, t, vox = raycast_many(grid, o[None], d[None], max_dist)
    if not hit[0]:
        return None
    return Hit(o + t[0] * d, float(t[0]), tuple(int(x) for x in vox[0]))


def _offset_endpoints(grid: OccupancyGrid, pts: NDArray[np.float64],
                      normals: NDArray[np.float64] | None) -> NDArray[np.float64]:
    occ = grid.occupied_mask(pts)
    if not occ.any():
        return pts
    out = pts.copy()
    vox = grid.voxels_of(pts[occ])
    if normals is not None:
        nrm = np.asarray(normals, dtype=np.float64)[occ]
    else:
        nrm = np.array([grid.normal_at(v) for v in vox])
    # half a voxel measured along the dominant axis (so tilted normals still
    # clear the face), plus a hair so face-centered points leave the boundary
    dom = np.abs(nrm).max(axis=1, keepdims=True)
    step = np.divide(nrm, dom, out=np.zeros_like(nrm), where=dom > 0)
    out[occ] = grid.clamp_inside(pts[occ] + (0.5 + 1e-6) * grid.resolution * step)
    return out


def visible_many(grid: OccupancyGrid, a: ArrayLike, b: ArrayLike,
                 normals_a: ArrayLike | None = None,
                 normals_b: ArrayLike | None = None) -> NDArray[np.bool_]:
    """Vectorized :func:`mutually_visible` over paired endpoint arrays."""
    pa = np.atleast_2d(np.asarray(a, dtype=np.float64))
    pb = np.atleast_2d(np.asarray(b, dtype=np.float64))
    pa, pb = np.broadcast_arrays(pa, pb)
    same = np.all(pa == pb, axis=1)
    pa = _offset_endpoints(grid, pa, None if normals_a is None else np.broadcast_to(normals_a, pa.shape))
    pb = _offset_endpoints(grid, pb, None if normals_b is None else np.broadcast_to(normals_b, pb.shape))
    # canonical direction keeps the test exactly symmetric
    flip = _lex_greater(pa, pb)
    first = np.where(flip[:, None], pb, pa)
    second = np.where(flip[:, None], pa, pb)
    blocked = kernels.segments_blocked(
        grid.occ_u8, np.ascontiguousarray(grid.to_grid(first)),
        np.ascontiguousarray(grid.to_grid(second)))
    return same | ~blocked


def _lex_greater(a: NDArray, b: NDArray) -> NDArray[np.bool_]:
    gt = np.zeros(len(a), dtype=bool)
    decided = np.zeros(len(a), dtype=bool)
    for k in range(3):
        gt |= ~decided & (a[:, k] > b[:, k])
        decided |= a[:, k] != b[:, k]
    return gt


def mutually_visible(grid: OccupancyGrid, a: ArrayLike, b: ArrayLike,
                     normal_a: ArrayLike | None = None,
                     normal_b: ArrayLike | None = None) -> bool:
    """True iff the open segment between ``a`` and ``b`` crosses no occupied voxel.

    Endpoints inside occupied voxels are first pushed half a voxel along
    their outward normal (taken from the grid unless given explicitly).
    """
    pa, pb = as_vec3(a, "a"), as_vec3(b, "b")
    for p in (pa, pb):
        if not grid.in_bounds(p):
            raise DomainError(f"point {p.tolist()} is outside the grid bounds")
    na = None if normal_a is None else as_vec3(normal_a)[None]
    nb = None if normal_b is None else as_vec3(normal_b)[None]
    return bool(visible_many(grid, pa[None], pb[None], na, nb)[0])


# -- surfaces ----------------------------------------------------------------

def surface_voxel_array(grid: OccupancyGrid) -> NDArray[np.int64]:
    """Occupied voxels with at least one free in-bounds 6-neighbor, as (N, 3)."""
    occ = grid.occupancy
    free_nb = np.zeros_like(occ)
    free = ~occ
    free_nb[1:] |= free[:-1]
    free_nb[:-1] |= free[1:]
    free_nb[:, 1:] |= free[:, :-1]
    free_nb[:, :-1] |= free[:, 1:]
    free_nb[:, :, 1:] |= free[:, :, :-1]
    free_nb[:, :, :-1] |= free[:, :, 1:]
    return np.argwhere(occ & free_nb)


def extract_surface_voxels(grid: OccupancyGrid) -> set[tuple[int, int, int]]:
    return {tuple(int(x) for x in v) for v in surface_voxel_array(grid)}


def surface_normals(grid: OccupancyGrid, voxels: NDArray[np.int64]) -> NDArray[np.float64]:
    """Unit outward normals for many voxels (zero where undefined)."""
    occ = grid.occupancy
    dims = np.array(grid.dims)
    acc = np.zeros((len(voxels), 3))
    for d in _NEIGHBORS6:
        nb = voxels + d
        inside = np.all((nb >= 0) & (nb < dims), axis=1)
        free = np.zeros(len(voxels), dtype=bool)
        nbi = nb[inside]
        free[inside] = ~occ[nbi[:, 0], nbi[:, 1], nbi[:, 2]]
        acc[free] += d
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return np.divide(acc, norm, out=np.zeros_like(acc), where=norm > 0)


def fibonacci_sphere(n: int) -> NDArray[np.float64]:
    """``n`` near-uniform unit directions (golden-angle spiral)."""
    if n < 1:
        raise DomainError("need at least one direction")
    i = np.arange(n, dtype=np.float64) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - math.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
