"""Visibility-based scene partitioning.

Surface voxels are grouped into connected patches, oversized patches are
split along their principal axis, and patch representatives are clustered
into regions whose members all see each other.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import DomainError, EmptyRegionError
from .scene import _NEIGHBORS6, OccupancyGrid, surface_normals, surface_voxel_array, visible_many

log = logging.getLogger(__name__)

DEFAULT_MAX_EXTENT = 4.0
DEFAULT_D = 8.0


@dataclass
class SurfacePatch:
    voxels: NDArray[np.int64]
    representative: NDArray[np.float64]
    normal: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def from_voxels(cls, grid: OccupancyGrid, voxels: NDArray[np.int64],
                    normals: NDArray[np.float64] | None = None) -> "SurfacePatch":
        voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
        centers = grid.voxel_center(voxels)
        if normals is None:
            normals = surface_normals(grid, voxels)
        n = normals.sum(axis=0)
        norm = np.linalg.norm(n)
        return cls(voxels, centers.mean(axis=0), n / norm if norm > 0 else np.zeros(3))


@dataclass
class Region:
    id: int
    patches: list[int]
    center: NDArray[np.float64]
    waypoints: NDArray[np.float64] = field(default_factory=lambda: np.zeros((0, 3)))


@dataclass
class Partition:
    regions: list[Region]
    D: float
    patches: list[SurfacePatch]
    seed: int = 0
    max_extent: float = DEFAULT_MAX_EXTENT

    @property
    def m(self) -> int:
        return len(self.regions)

    def representatives(self, region_id: int) -> NDArray[np.float64]:
        return np.array([self.patches[p].representative for p in self.regions[region_id].patches])

    def rep_normals(self, region_id: int) -> NDArray[np.float64]:
        return np.array([self.patches[p].normal for p in self.regions[region_id].patches])

    def patch_region(self) -> NDArray[np.int64]:
        out = np.full(len(self.patches), -1, dtype=np.int64)
        for r in self.regions:
            out[r.patches] = r.id
        return out

    def to_json_dict(self) -> dict:
        return {
            "D": self.D,
            "seed": self.seed,
            "max_extent": self.max_extent,
            "regions": [
                {
                    "id": r.id,
                    "center": r.center.tolist(),
                    "patches": [int(p) for p in r.patches],
                    "representatives": self.representatives(r.id).tolist(),
                    "waypoints": np.asarray(r.waypoints).tolist(),
                }
                for r in self.regions
            ],
            "patches": [
                {"voxels": p.voxels.tolist(), "representative": p.representative.tolist(),
                 "normal": p.normal.tolist()}
                for p in self.patches
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "Partition":
        patches = [
            SurfacePatch(np.asarray(p["voxels"], dtype=np.int64).reshape(-1, 3),
                         np.asarray(p["representative"], dtype=np.float64),
                         np.asarray(p["normal"], dtype=np.float64))
            for p in data["patches"]
        ]
        regions = [
            Region(int(r["id"]), [int(p) for p in r["patches"]],
                   np.asarray(r["center"], dtype=np.float64),
                   np.asarray(r.get("waypoints", []), dtype=np.float64).reshape(-1, 3))
            for r in data["regions"]
        ]
        return cls(regions, float(data["D"]), patches, int(data.get("seed", 0)),
                   float(data.get("max_extent", DEFAULT_MAX_EXTENT)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Partition":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


# -- segmentation ----------------------------------------------------------

def _exposure(grid: OccupancyGrid, voxels: NDArray[np.int64]) -> NDArray[np.int64]:
    """6-bit mask of the faces of each voxel that border free space."""
    dims = np.array(grid.dims)
    mask = np.zeros(len(voxels), dtype=np.int64)
    for bit, d in enumerate(_NEIGHBORS6):
        nb = voxels + d
        inside = np.all((nb >= 0) & (nb < dims), axis=1)
        nbi = nb[inside]
        free = np.zeros(len(voxels), dtype=bool)
        free[inside] = ~grid.occupancy[nbi[:, 0], nbi[:, 1], nbi[:, 2]]
        mask[free] |= 1 << bit
    return mask


def _surface_graph(voxels: NDArray[np.int64], exposure: NDArray[np.int64]):
    """Sparse adjacency of 6-neighbor surface voxels that face a common direction.

    Two neighbors link when they expose at least one face along the same
    axis direction, so the opposite faces of a wall stay apart.
    """
    key = {tuple(v): i for i, v in enumerate(voxels.tolist())}
    rows, cols = [], []
    for d in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
        for i, v in enumerate(voxels.tolist()):
            j = key.get((v[0] + d[0], v[1] + d[1], v[2] + d[2]))
            if j is not None and exposure[i] & exposure[j]:
                rows.append(i)
                cols.append(j)
    n = len(voxels)
    return coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()


def _components(adj, members: NDArray[np.int64]) -> list[NDArray[np.int64]]:
    sub = adj[members][:, members]
    ncomp, labels = connected_components(sub, directed=False)
    return [members[labels == c] for c in range(ncomp)]


def _split(centers: NDArray[np.float64]) -> NDArray[np.bool_]:
    """Side mask for splitting a point set through its centroid."""
    mean = centers.mean(axis=0)
    cov = np.cov((centers - mean).T, bias=True)
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] > 1e-12:
        side = (centers - mean) @ evecs[:, -1] < 0
        if 0 < side.sum() < len(side):
            return side
    # degenerate covariance: split along the longest axis-aligned extent
    axis = int(np.argmax(np.ptp(centers, axis=0)))
    order = np.argsort(centers[:, axis], kind="stable")
    side = np.zeros(len(centers), dtype=bool)
    side[order[: len(order) // 2]] = True
    return side


def _spread(centers: NDArray[np.float64]) -> float:
    if len(centers) < 2:
        return 0.0
    mean = centers.mean(axis=0)
    evals, evecs = np.linalg.eigh(np.cov((centers - mean).T, bias=True))
    proj = (centers - mean) @ evecs[:, -1]
    return float(np.ptp(proj))


def segment_surfaces(surface, grid: OccupancyGrid,
                     max_extent: float = DEFAULT_MAX_EXTENT) -> list[SurfacePatch]:
    """Split surface voxels into connected patches no wider than ``max_extent``.

    ``surface`` is a set of voxel index triples or an (N, 3) array.
    """
    if not max_extent > grid.resolution:
        raise DomainError(f"max_extent {max_extent} must exceed the resolution {grid.resolution}")
    if isinstance(surface, np.ndarray):
        voxels = surface.astype(np.int64).reshape(-1, 3)
    else:
        voxels = np.array(sorted(surface), dtype=np.int64).reshape(-1, 3)
    if len(voxels) == 0:
        return []
    # canonical order makes the output independent of set iteration order
    voxels = voxels[np.lexsort(voxels.T[::-1])]
    normals = surface_normals(grid, voxels)
    centers = grid.voxel_center(voxels)
    adj = _surface_graph(voxels, _exposure(grid, voxels))

    patches: list[SurfacePatch] = []
    stack = _components(adj, np.arange(len(voxels)))[::-1]
    while stack:
        members = stack.pop()
        if _spread(centers[members]) <= max_extent:
            patches.append(SurfacePatch.from_voxels(grid, voxels[members], normals[members]))
            continue
        side = _split(centers[members])
        parts = _components(adj, members[side]) + _components(adj, members[~side])
        stack.extend(parts[::-1])
    return patches


# -- clustering --------------------------------------------------------------

def visibility_matrix(grid: OccupancyGrid, points: NDArray[np.float64],
                      normals: NDArray[np.float64] | None = None) -> NDArray[np.bool_]:
    n = len(points)
    vis = np.eye(n, dtype=bool)
    if n < 2:
        return vis
    iu, ju = np.triu_indices(n, k=1)
    na = None if normals is None else normals[iu]
    nb = None if normals is None else normals[ju]
    v = visible_many(grid, points[iu], points[ju], na, nb)
    vis[iu, ju] = v
    vis[ju, iu] = v
    return vis


def cluster_regions(patches: list[SurfacePatch], grid: OccupancyGrid,
                    D: float = DEFAULT_D, seed: int = 0) -> Partition:
    """Greedy visibility clustering of patch representatives.

    A cluster grows by repeatedly taking the unclustered point nearest its
    current center that sees every member and lies within ``D`` of the
    center. The first seed is drawn from ``seed``; each later cluster starts
    at the unclustered point nearest the previous cluster's center.
    """
    if not patches:
        raise DomainError("no surface patches to cluster")
    if not D > 0:
        raise DomainError(f"D must be positive, got {D}")
    reps = np.array([p.representative for p in patches])
    normals = np.array([p.normal for p in patches])
    vis = visibility_matrix(grid, reps, normals)
    n = len(reps)
    unclustered = np.ones(n, dtype=bool)
    regions: list[Region] = []
    start = int(np.random.default_rng(seed).integers(n))
    while True:
        members = [start]
        unclustered[start] = False
        center = reps[start].copy()
        while True:
            cand = np.flatnonzero(unclustered)
            if cand.size == 0:
                break
            dist = np.linalg.norm(reps[cand] - center, axis=1)
            ok = (dist < D) & vis[np.ix_(cand, members)].all(axis=1)
            if not ok.any():
                break
            order = np.lexsort((cand[ok], dist[ok]))
            pick = int(cand[ok][order[0]])
            members.append(pick)
            unclustered[pick] = False
            center = reps[members].mean(axis=0)
        regions.append(Region(len(regions), members, center))
        rest = np.flatnonzero(unclustered)
        if rest.size == 0:
            break
        dist = np.linalg.norm(reps[rest] - center, axis=1)
        start = int(rest[np.lexsort((rest, dist))[0]])
    return Partition(regions, float(D), list(patches), seed)


# -- waypoints -------------------------------------------------------------

def _clear_mask(grid: OccupancyGrid, points: NDArray[np.float64], clearance: int) -> NDArray[np.bool_]:
    vox = np.floor(grid.to_grid(points)).astype(np.int64)
    dims = np.array(grid.dims)
    ok = np.all((vox >= 0) & (vox < dims), axis=1)
    r = range(-clearance, clearance + 1)
    for dx in r:
        for dy in r:
            for dz in r:
                nb = vox + (dx, dy, dz)
                inside = np.all((nb >= 0) & (nb < dims), axis=1)
                occ = np.ones(len(points), dtype=bool)
                nbi = nb[inside]
                occ[inside] = grid.occupancy[nbi[:, 0], nbi[:, 1], nbi[:, 2]]
                ok &= ~occ
    return ok


def region_waypoints(partition: Partition, region_id: int, grid: OccupancyGrid,
                     spacing: float, height: float = 1.0, clearance: int = 1) -> NDArray[np.float64]:
    """Free lattice points at ``height`` that belong to a region.

    A point belongs to the region when its nearest surface patch is in the
    region and it sees at least one of the region's representatives. If no
    lattice point qualifies, the free point nearest the region center that
    sees a representative is used instead.
    """
    if not spacing > 0:
        raise DomainError(f"spacing must be positive, got {spacing}")
    region = partition.regions[region_id]
    reps = partition.representatives(region_id)
    rep_n = partition.rep_normals(region_id)

    lo, hi = grid.bounds_min, grid.bounds_max
    xs = np.arange(lo[0] + spacing / 2, hi[0], spacing)
    ys = np.arange(lo[1] + spacing / 2, hi[1], spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, float(height))], axis=1)
    pts = pts[_clear_mask(grid, pts, clearance)]

    owner = _nearest_patch_region(partition, grid, pts)
    pts = pts[owner == region_id]
    pts = pts[_sees_any(grid, pts, reps, rep_n)]
    if len(pts):
        return pts

    # fallback: clear voxel centers, nearest the region center first
    free = np.argwhere(~grid.occupancy)
    cand = grid.voxel_center(free)
    cand = cand[_clear_mask(grid, cand, clearance)]
    if len(cand):
        order = np.argsort(np.linalg.norm(cand - region.center, axis=1), kind="stable")
        for chunk in np.array_split(order, max(1, len(order) // 256)):
            seen = _sees_any(grid, cand[chunk], reps, rep_n)
            if seen.any():
                return cand[chunk][seen][:1]
        # no clear point sees a representative (e.g. a patch whose mean lands
        # inside a door jamb): settle for clear space next to the patches
        voxels = np.concatenate([partition.patches[p].voxels for p in region.patches])
        dist, _ = cKDTree(grid.voxel_center(voxels)).query(cand)
        best = int(np.argmin(dist))
        if dist[best] <= max(spacing, 1.0) + (clearance + 1) * grid.resolution:
            return cand[best:best + 1]
    raise EmptyRegionError(f"region {region_id} has no reachable free space")


def _nearest_patch_region(partition: Partition, grid: OccupancyGrid,
                          pts: NDArray[np.float64]) -> NDArray[np.int64]:
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    owner_of_patch = partition.patch_region()
    centers, owners = [], []
    for i, p in enumerate(partition.patches):
        centers.append(grid.voxel_center(p.voxels))
        owners.append(np.full(len(p.voxels), owner_of_patch[i]))
    tree = cKDTree(np.concatenate(centers))
    _, idx = tree.query(pts)
    return np.concatenate(owners)[idx]


def _sees_any(grid, pts, reps, rep_n) -> NDArray[np.bool_]:
    if len(pts) == 0:
        return np.zeros(0, dtype=bool)
    a = np.repeat(pts, len(reps), axis=0)
    b = np.tile(reps, (len(pts), 1))
    nb = np.tile(rep_n, (len(pts), 1))
    return visible_many(grid, a, b, None, nb).reshape(len(pts), len(reps)).any(axis=1)


def partition_scene(grid: OccupancyGrid, max_extent: float = DEFAULT_MAX_EXTENT,
                    D: float = DEFAULT_D, seed: int = 0, spacing: float = 1.0,
                    height: float = 1.0) -> Partition:
    """Full pipeline: surfaces -> patches -> regions -> waypoints.

    A region with no reachable waypoint is kept (with an empty waypoint
    array) and logged; travel costs to it are then unreachable.
    """
    surface = surface_voxel_array(grid)
    if len(surface) == 0:
        raise DomainError("scene has no surface voxels")
    patches = segment_surfaces(surface, grid, max_extent)
    part = cluster_regions(patches, grid, D, seed)
    for r in part.regions:
        try:
            r.waypoints = region_waypoints(part, r.id, grid, spacing, height)
        except EmptyRegionError:
            log.warning("region %d has no reachable waypoint", r.id)
            r.waypoints = np.zeros((0, 3))
    part.max_extent = max_extent
    return part
