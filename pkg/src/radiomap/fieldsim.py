"""Synthetic field data: a multipath ground-truth oracle and plan execution.

The oracle launches rays from the transmitter, reflects them specularly off
voxel faces, and collects every distinct reflection sequence that passes
near the receiver. The direct path is added in closed form. It shares no
machinery with the learned model beyond the voxel grid.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from . import kernels
from .errors import DomainError, MalformedInputError
from .partition import Partition
from .planner import (UNREACHABLE, CollectionMatrix, Plan, canon, init_matrix, mark,
                      replan_on_failure)
from .scene import OccupancyGrid, as_vec3, fibonacci_sphere, visible_many

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class OracleParams:
    ref_power_dbm: float = -30.0
    d0: float = 1.0
    path_loss_exp: float = 2.0
    reflection_coeff: float = 0.6
    max_bounces: int = 3
    noise_floor_dbm: float = -80.0
    noise_sigma_dbm: float = 0.0
    capture_radius: float = 0.3
    n_rays: int = 4096

    def __post_init__(self):
        if not self.ref_power_dbm > self.noise_floor_dbm:
            raise DomainError("ref_power_dbm must exceed noise_floor_dbm")
        if not self.d0 > 0:
            raise DomainError("d0 must be positive")
        if not 0 < self.reflection_coeff <= 1:
            raise DomainError("reflection_coeff must be in (0, 1]")
        if self.max_bounces < 0 or self.n_rays < 1 or self.capture_radius <= 0:
            raise DomainError("max_bounces >= 0, n_rays >= 1 and capture_radius > 0 required")
        if self.noise_sigma_dbm < 0:
            raise DomainError("noise_sigma_dbm must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "OracleParams":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _mw(dbm):
    return 10.0 ** (np.asarray(dbm) / 10.0)


class MultipathOracle:
    """Ray-launching RSSI oracle with a per-transmitter trace cache."""

    def __init__(self, grid: OccupancyGrid, params: OracleParams | None = None, seed: int = 0):
        self.grid = grid
        self.params = params or OracleParams()
        self.seed = int(seed)
        self._dirs = fibonacci_sphere(self.params.n_rays)
        self._cache: dict[bytes, tuple] = {}

    def _check_free(self, p: NDArray[np.float64], name: str) -> None:
        if not self.grid.in_bounds(p):
            raise DomainError(f"{name} {p.tolist()} is outside the scene")
        if self.grid.is_occupied(p):
            raise DomainError(f"{name} {p.tolist()} is inside an occupied voxel")

    def _segments(self, tx: NDArray[np.float64]):
        key = tx.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        g, P = self.grid, self.params
        diag = float(np.linalg.norm(g.bounds_max - g.bounds_min))
        max_len = diag * (P.max_bounces + 1) / g.resolution
        starts, sdirs, lengths, cum, sigs, valid = kernels.trace_specular(
            g.occ_u8, np.ascontiguousarray(g.to_grid(tx)), np.ascontiguousarray(self._dirs),
            P.max_bounces, max_len)
        bounce = np.broadcast_to(np.arange(P.max_bounces + 1), valid.shape)
        keep = valid & (bounce >= 1)
        segs = (g.bounds_min + starts[keep] * g.resolution, sdirs[keep],
                lengths[keep] * g.resolution, cum[keep] * g.resolution,
                bounce[keep].astype(np.int64), sigs[keep])
        if len(self._cache) > 256:
            self._cache.clear()
        self._cache[key] = segs
        return segs

    def path_powers(self, tx: ArrayLike, rx: ArrayLike) -> NDArray[np.float64]:
        """Linear (mW) power of every distinct path from tx to rx."""
        tx, rx = as_vec3(tx, "tx"), as_vec3(rx, "rx")
        self._check_free(tx, "tx")
        self._check_free(rx, "rx")
        if np.array_equal(tx, rx):
            raise DomainError("tx and rx coincide")
        P = self.params
        ref = float(_mw(P.ref_power_dbm))
        powers = []
        d = float(np.linalg.norm(rx - tx))
        if visible_many(self.grid, tx[None], rx[None])[0]:
            powers.append(ref * (P.d0 / max(d, P.d0)) ** P.path_loss_exp)
        s, u, L, cum, b, sig = self._segments(tx)
        if len(s):
            t = np.clip(np.einsum("ij,ij->i", rx - s, u), 0.0, L)
            closest = s + t[:, None] * u
            dist = np.linalg.norm(closest - rx, axis=1)
            near = np.flatnonzero(dist <= P.capture_radius)
            if near.size:
                # one contribution per reflection sequence: the ray passing closest
                order = near[np.lexsort((dist[near], sig[near]))]
                _, first = np.unique(sig[order], return_index=True)
                pick = order[first]
                clear = visible_many(self.grid, closest[pick], np.broadcast_to(rx, (len(pick), 3)))
                pick = pick[clear]
                length = cum[pick] + t[pick] + dist[pick]
                p = (ref * (P.d0 / np.maximum(length, P.d0)) ** P.path_loss_exp
                     * P.reflection_coeff ** (2 * b[pick]))
                powers.extend(np.sort(p).tolist())
        return np.asarray(powers, dtype=np.float64)

    def rssi(self, tx: ArrayLike, rx: ArrayLike) -> float:
        P = self.params
        powers = self.path_powers(tx, rx)
        total = math.fsum(powers.tolist())
        dbm = 10.0 * math.log10(total) if total > 0 else -math.inf
        if P.noise_sigma_dbm > 0:
            dbm += P.noise_sigma_dbm * self._noise(tx, rx)
        return max(dbm, P.noise_floor_dbm)

    def _noise(self, tx, rx) -> float:
        raw = struct.pack("<q6d", self.seed, *as_vec3(tx), *as_vec3(rx))
        key = int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")
        return float(np.random.default_rng(key).standard_normal())

    def at_floor(self, value: float) -> bool:
        return value <= self.params.noise_floor_dbm


def oracle_rssi(grid: OccupancyGrid, params: OracleParams, tx: ArrayLike, rx: ArrayLike,
                seed: int = 0) -> float:
    """One-off oracle query; use :class:`MultipathOracle` for many queries."""
    return MultipathOracle(grid, params, seed).rssi(tx, rx)


# -- datasets --------------------------------------------------------------

@dataclass
class Measurement:
    tx: NDArray[np.float64]
    rx: NDArray[np.float64]
    rssi_dbm: float
    pair: tuple[int, int] | None = None

    def to_json(self) -> dict:
        out = {"tx": [float(v) for v in self.tx], "rx": [float(v) for v in self.rx],
               "rssi_dbm": float(self.rssi_dbm)}
        if self.pair is not None:
            out["pair"] = [int(self.pair[0]), int(self.pair[1])]
        return out

    @classmethod
    def from_json(cls, d: dict) -> "Measurement":
        try:
            tx, rx = as_vec3(d["tx"], "tx"), as_vec3(d["rx"], "rx")
            pair = tuple(int(v) for v in d["pair"]) if d.get("pair") is not None else None
            return cls(tx, rx, float(d["rssi_dbm"]), pair)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedInputError(f"bad measurement record {d!r}: {exc}") from exc


@dataclass
class Dataset:
    measurements: list[Measurement] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.measurements)

    @property
    def tx(self) -> NDArray[np.float64]:
        return np.array([m.tx for m in self.measurements]).reshape(-1, 3)

    @property
    def rx(self) -> NDArray[np.float64]:
        return np.array([m.rx for m in self.measurements]).reshape(-1, 3)

    @property
    def rssi(self) -> NDArray[np.float64]:
        return np.array([m.rssi_dbm for m in self.measurements], dtype=np.float64)

    def subset(self, idx: Iterable[int]) -> "Dataset":
        return Dataset([self.measurements[i] for i in idx], dict(self.meta))

    def split(self, fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Seeded random split into (first, rest) with ``fraction`` in the first part."""
        perm = np.random.default_rng(seed).permutation(len(self))
        k = int(round(fraction * len(self)))
        return self.subset(sorted(perm[:k])), self.subset(sorted(perm[k:]))

    def save(self, path: str | Path) -> None:
        if not self.measurements:
            Path(path).write_text("")
            return
        lines = [json.dumps({"schema": SCHEMA_VERSION, "meta": self.meta}, sort_keys=True)]
        lines += [json.dumps(m.to_json()) for m in self.measurements]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        text = Path(path).read_text()
        rows = [ln for ln in text.splitlines() if ln.strip()]
        if not rows:
            return cls()
        try:
            records = [json.loads(r) for r in rows]
        except json.JSONDecodeError as exc:
            raise MalformedInputError(f"{path}: invalid JSON line: {exc}") from exc
        meta = {}
        if "schema" in records[0]:
            if records[0]["schema"] != SCHEMA_VERSION:
                raise MalformedInputError(f"{path}: unsupported dataset schema {records[0]['schema']}")
            meta = records[0].get("meta", {})
            records = records[1:]
        return cls([Measurement.from_json(r) for r in records], meta)


def survey(oracle: MultipathOracle, tx_positions: ArrayLike, rx_positions: ArrayLike,
           pair: tuple[int, int] | None = None) -> Dataset:
    """Measure every (tx, rx) combination, skipping coincident points."""
    out = []
    for tx in np.atleast_2d(np.asarray(tx_positions, dtype=np.float64)):
        for rx in np.atleast_2d(np.asarray(rx_positions, dtype=np.float64)):
            if np.array_equal(tx, rx):
                continue
            out.append(Measurement(tx.copy(), rx.copy(), oracle.rssi(tx, rx), pair))
    return Dataset(out, {"oracle": asdict(oracle.params), "seed": oracle.seed})


# -- plan execution --------------------------------------------------------

def _tour(points: NDArray[np.float64], entry: NDArray[np.float64]) -> tuple[NDArray[np.float64], float]:
    """Nearest-neighbor visiting order from ``entry``; returns (ordered points, length)."""
    left = list(range(len(points)))
    cur, length, order = entry, 0.0, []
    while left:
        d = np.linalg.norm(points[left] - cur, axis=1)
        k = int(np.argmin(d))
        length += float(d[k])
        cur = points[left.pop(k)]
        order.append(cur)
    return np.array(order).reshape(-1, 3), length


@dataclass
class ExecutionLog:
    replans: list[dict] = field(default_factory=list)
    configs_visited: list[tuple[int, ...]] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)


def execute_plan(plan: Plan, partition: Partition, grid: OccupancyGrid, travel: ArrayLike,
                 oracle: MultipathOracle, spacing: float = 1.0,
                 matrix: CollectionMatrix | None = None,
                 unreachable_pairs: Iterable[tuple[int, int]] = (),
                 max_steps: int = 10_000) -> tuple[Dataset, CollectionMatrix, float]:
    """Drive the team through a plan, measuring every pending region pair.

    Robots move together configuration by configuration. At each stop every
    robot tours its region's waypoints and each pending pair of occupied
    regions is measured over all waypoint pairs. A pair whose samples all
    sit at the noise floor is marked infeasible and the rest of the plan is
    re-solved from the current configuration. ``unreachable_pairs`` forces
    that outcome for the listed pairs (fault injection).

    The returned dataset's ``meta["execution"]`` records replans and skips.
    """
    travel = np.asarray(travel, dtype=np.float64)
    m = partition.m
    matrix = (matrix or init_matrix(m)).copy()
    forced = {canon(*p) for p in unreachable_pairs}
    n = len(plan.start)
    waypoints = []
    for r in partition.regions:
        wp = np.asarray(r.waypoints, dtype=np.float64).reshape(-1, 3)
        if spacing > 0 and len(wp) > 1:
            wp = _thin(wp, spacing)
        waypoints.append(wp)

    record = ExecutionLog()
    data: list[Measurement] = []
    total = 0.0
    cur = tuple(plan.start)
    pos = [waypoints[r][0] if len(waypoints[r]) else partition.regions[r].center for r in cur]
    queue = list(plan.configs)
    steps = 0
    while queue and steps < max_steps:
        steps += 1
        cfg = queue.pop(0)
        record.configs_visited.append(tuple(cfg))
        at = []
        for p, (a, b) in enumerate(zip(cur, cfg)):
            leg = float(travel[a, b])
            ok = leg < UNREACHABLE and len(waypoints[b]) > 0
            if not ok:
                log.warning("robot %d cannot reach region %d; skipping it", p, b)
                record.skipped.append({"robot": p, "region": int(b)})
                at.append(None)
                continue
            total += leg
            tour, length = _tour(waypoints[b], waypoints[b][0])
            total += length
            at.append(tour)
            pos[p] = tour[-1]
        failed = []
        for p in range(n):
            for q in range(p + 1, n):
                i, j = cfg[p], cfg[q]
                if i == j or matrix.state[i, j] != 0:
                    continue
                pair = canon(i, j)
                if at[p] is None or at[q] is None:
                    matrix = mark(matrix, pair, -1)
                    failed.append(pair)
                    continue
                tx_pts, rx_pts = (at[p], at[q]) if i < j else (at[q], at[p])
                values = []
                for tx in tx_pts:
                    for rx in rx_pts:
                        if np.array_equal(tx, rx):
                            continue
                        v = oracle.params.noise_floor_dbm if pair in forced else oracle.rssi(tx, rx)
                        values.append(v)
                        data.append(Measurement(tx.copy(), rx.copy(), v, pair))
                if all(oracle.at_floor(v) for v in values):
                    matrix = mark(matrix, pair, -1)
                    failed.append(pair)
                else:
                    matrix = mark(matrix, pair, 1)
        cur = tuple(cfg)
        if failed or (not queue and matrix.count(0)):
            # with nothing pending the re-solve is an empty plan: collection done
            new = replan_on_failure(matrix, cur, n, travel)
            record.replans.append({"after": list(cur), "failed": [list(p) for p in failed],
                                   "new_configs": len(new.configs)})
            queue = list(new.configs)
    meta = {"oracle": asdict(oracle.params), "seed": oracle.seed,
            "execution": {"replans": record.replans, "skipped": record.skipped,
                          "configs_visited": [list(c) for c in record.configs_visited],
                          "travel_m": total}}
    return Dataset(data, meta), matrix, total


def _thin(points: NDArray[np.float64], spacing: float) -> NDArray[np.float64]:
    """Greedy subsample so kept points are at least ``spacing`` apart (input order)."""
    kept = [points[0]]
    for p in points[1:]:
        if np.min(np.linalg.norm(np.array(kept) - p, axis=1)) >= spacing - 1e-9:
            kept.append(p)
    return np.array(kept)


# -- preprocessing ---------------------------------------------------------

def preprocess(dataset: Dataset, filter_radius: float, floor_dbm: float = -80.0,
               fill: Sequence[tuple[ArrayLike, ArrayLike, tuple[int, int] | None]] = ()) -> Dataset:
    """Median-filter nearby readings, collapse duplicates, append floor fills.

    A reading's neighbors are readings whose tx and rx both lie within
    ``filter_radius`` of its own tx and rx.
    """
    if filter_radius < 0:
        raise DomainError(f"filter_radius must be >= 0, got {filter_radius}")
    ms = dataset.measurements
    out: list[Measurement] = []
    seen: set[bytes] = set()
    if ms:
        tx, rx, v = dataset.tx, dataset.rx, dataset.rssi
        tree = cKDTree(tx)
        for k, m in enumerate(ms):
            key = np.concatenate([m.tx, m.rx]).tobytes()
            if key in seen:
                continue
            seen.add(key)
            near = np.asarray(tree.query_ball_point(m.tx, filter_radius), dtype=np.int64)
            near = near[np.linalg.norm(rx[near] - m.rx, axis=1) <= filter_radius]
            value = float(np.median(v[near])) if filter_radius > 0 else float(m.rssi_dbm)
            out.append(Measurement(m.tx, m.rx, max(value, floor_dbm), m.pair))
    for tx_f, rx_f, pair in fill:
        tx_f, rx_f = as_vec3(tx_f, "tx"), as_vec3(rx_f, "rx")
        key = np.concatenate([tx_f, rx_f]).tobytes()
        if key in seen:
            continue
        seen.add(key)
        out.append(Measurement(tx_f, rx_f, float(floor_dbm), None if pair is None else tuple(pair)))
    return Dataset(out, dict(dataset.meta))
