"""Physics half of the hybrid model: LOS point sets, rendering and LOS compensation.

All rendered magnitudes live on a normalized [0, 1] scale that maps
affinely onto [noise_floor_dbm, ref_power_dbm].
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DegenerateSceneError, DomainError, NumericFaultError
from .scene import OccupancyGrid, as_vec3, fibonacci_sphere, raycast_many, visible_many

log = logging.getLogger(__name__)

TX, RX = "tx", "rx"


@dataclass
class RenderConfig:
    k_tx: int = 64
    k_rx: int = 64
    s: int = 4
    sub_range: float = 0.5
    d0: float = 1.0
    ref_power_dbm: float = -30.0
    path_loss_exp: float = 2.0
    noise_floor_dbm: float = -80.0
    gain: NDArray[np.float64] | None = None  # per Rx direction, sums to 1; None -> uniform

    def __post_init__(self):
        if min(self.k_tx, self.k_rx, self.s) < 1:
            raise DomainError("k_tx, k_rx and s must be >= 1")
        if not self.sub_range > 0 or not self.d0 > 0:
            raise DomainError("sub_range and d0 must be positive")
        if not self.ref_power_dbm > self.noise_floor_dbm:
            raise DomainError("ref_power_dbm must exceed noise_floor_dbm")
        if self.gain is not None:
            g = np.asarray(self.gain, dtype=np.float64)
            if g.shape != (self.k_rx,) or np.any(g < 0) or abs(g.sum() - 1.0) > 1e-9:
                raise DomainError("gain must be k_rx nonnegative weights summing to 1")
            self.gain = g

    @property
    def gains(self) -> NDArray[np.float64]:
        return self.gain if self.gain is not None else np.full(self.k_rx, 1.0 / self.k_rx)

    @property
    def span_db(self) -> float:
        return self.ref_power_dbm - self.noise_floor_dbm

    def to_norm(self, dbm: ArrayLike) -> NDArray[np.float64]:
        return np.clip((np.asarray(dbm, dtype=np.float64) - self.noise_floor_dbm) / self.span_db, 0.0, 1.0)

    def to_dbm(self, r: ArrayLike) -> NDArray[np.float64]:
        return self.noise_floor_dbm + self.span_db * np.asarray(r, dtype=np.float64)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("k_tx", "k_rx", "s", "sub_range", "d0",
                                              "ref_power_dbm", "path_loss_exp", "noise_floor_dbm")}
        out["gain"] = None if self.gain is None else [float(x) for x in self.gain]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RenderConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class LosPointSet:
    """Sampled LOS points around one endpoint.

    Tx sets use ``points`` (J, 3) and ``weights`` (J,). Rx sets use
    ``dirs`` (K, 3), ``samples`` (K, s, 3), ``sigma`` (K, s) and
    ``ray_ids`` (K,), the index of each surviving direction in the sphere.
    """
    role: str
    anchor: NDArray[np.float64]
    points: NDArray[np.float64] = field(default_factory=lambda: np.zeros((0, 3)))
    weights: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))
    dirs: NDArray[np.float64] = field(default_factory=lambda: np.zeros((0, 3)))
    samples: NDArray[np.float64] = field(default_factory=lambda: np.zeros((0, 0, 3)))
    sigma: NDArray[np.float64] = field(default_factory=lambda: np.zeros((0, 0)))
    ray_ids: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def direct_path_weights(tx: ArrayLike, points: ArrayLike, cfg: RenderConfig) -> NDArray[np.float64]:
    """Normalized log-distance energy of the direct path from tx to each point."""
    tx = as_vec3(tx, "tx")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise DomainError("need at least one point")
    d = np.linalg.norm(pts - tx, axis=1)
    if np.any(d <= 0):
        raise DomainError("points must differ from tx")
    e = (cfg.d0 / np.maximum(d, cfg.d0)) ** cfg.path_loss_exp
    return e / e.sum()


def sample_los_points(grid: OccupancyGrid, pos: ArrayLike, role: str, cfg: RenderConfig) -> LosPointSet:
    """First-surface points seen from ``pos`` along a Fibonacci sphere of directions."""
    pos = as_vec3(pos, "pos")
    if role not in (TX, RX):
        raise DomainError(f"role must be {TX!r} or {RX!r}, got {role!r}")
    if not grid.in_bounds(pos) or grid.is_occupied(pos):
        raise DomainError(f"{role} position {pos.tolist()} is not in free space")
    k = cfg.k_tx if role == TX else cfg.k_rx
    dirs = fibonacci_sphere(k)
    hit, dist, _ = raycast_many(grid, pos[None], dirs)
    if not hit.any():
        raise DegenerateSceneError(f"no {role} ray from {pos.tolist()} hits a surface")
    if role == TX:
        pts = pos + dist[hit, None] * dirs[hit]
        return LosPointSet(TX, pos, points=pts, weights=direct_path_weights(pos, pts, cfg))
    ids = np.flatnonzero(hit)
    if cfg.s == 1:
        offs = np.zeros(1)
        step = cfg.sub_range
    else:
        offs = np.linspace(0.0, cfg.sub_range, cfg.s)
        step = cfg.sub_range / (cfg.s - 1)
    t = dist[ids, None] + offs[None, :]
    samples = pos + t[:, :, None] * dirs[ids, None, :]
    sigma = np.full(t.shape, step)
    return LosPointSet(RX, pos, dirs=dirs[ids], samples=samples, sigma=sigma, ray_ids=ids)


# -- rendering -----------------------------------------------------------

def ray_weights(delta: NDArray[np.float64], sigma: NDArray[np.float64]):
    """Volume-rendering weights along each ray.

    ``delta`` and ``sigma`` are (K, s). Returns ``(w, T)``: the per-sample
    weights T_i (1 - exp(-sigma_i delta_i)) and transmittances T_i.
    """
    tau = sigma * delta
    acc = np.cumsum(tau, axis=1) - tau
    T = np.exp(-acc)
    return T * -np.expm1(-tau), T


def ray_weights_backward(g_w, delta, sigma, w, T):
    """Gradient of the weights w.r.t. ``delta`` given upstream ``g_w`` (all (K, s))."""
    tau = sigma * delta
    gw_w = g_w * w
    later = np.cumsum(gw_w[:, ::-1], axis=1)[:, ::-1] - gw_w  # sum over i > n
    g_tau = g_w * T * np.exp(-tau) - later
    return g_tau * sigma


@dataclass
class RenderResult:
    magnitude: float
    field: complex
    per_ray: NDArray[np.complex128]  # (K,) gain-weighted ray contributions
    weights: NDArray[np.float64]  # (K, s)
    transmittance: NDArray[np.float64]  # (K, s)


def combine(delta, S_re, S_im, sigma, gains) -> RenderResult:
    """Accumulate per-sample signals into the Rx field (all arrays (K, s); gains (K,))."""
    w, T = ray_weights(delta, sigma)
    h_re = (w * S_re).sum(axis=1)
    h_im = (w * S_im).sum(axis=1)
    per_ray = gains * (h_re + 1j * h_im)
    R = complex(math.fsum(per_ray.real), math.fsum(per_ray.imag))
    return RenderResult(abs(R), R, per_ray, w, T)


def render_rx(tx_set: LosPointSet, rx_set: LosPointSet, net, cfg: RenderConfig | None = None):
    """Render the multipath magnitude at the receiver.

    Returns ``(magnitude, result)`` where ``result`` carries per-ray
    contributions, weights and transmittances.
    """
    cfg = cfg or RenderConfig()
    K, s = rx_set.sigma.shape
    delta, S_re, S_im = net.field(tx_set, rx_set)
    bad = ~(np.isfinite(delta) & np.isfinite(S_re) & np.isfinite(S_im))
    if bad.any():
        k, i = np.argwhere(bad)[0]
        raise NumericFaultError(f"non-finite network output at Rx ray {k}, sample {i} "
                                f"(point {rx_set.samples[k, i].tolist()})")
    res = combine(delta, S_re, S_im, rx_set.sigma, cfg.gains[rx_set.ray_ids])
    return res.magnitude, res


def los_factor(grid: OccupancyGrid, tx: ArrayLike, rx: ArrayLike, cfg: RenderConfig) -> float:
    """Direct-path share: 0 when tx and rx cannot see each other."""
    tx, rx = as_vec3(tx, "tx"), as_vec3(rx, "rx")
    if not visible_many(grid, tx[None], rx[None])[0]:
        return 0.0
    d = float(np.linalg.norm(rx - tx))
    return float(min(1.0, max(0.0, (cfg.d0 / max(d, cfg.d0)) ** cfg.path_loss_exp)))


def compensate_norm(magnitude: float, alpha_los: float) -> float:
    return alpha_los + (1.0 - alpha_los) * min(1.0, max(0.0, magnitude))


def los_compensate(multipath_mag: float, tx: ArrayLike, rx: ArrayLike, grid: OccupancyGrid,
                   cfg: RenderConfig, enabled: bool = True) -> float:
    """Blend the direct path with the rendered multipath; returns dBm.

    ``enabled=False`` drops the direct-path term (ablation).
    """
    if multipath_mag < 0:
        raise DomainError("multipath magnitude must be >= 0")
    a = los_factor(grid, tx, rx, cfg) if enabled else 0.0
    return float(cfg.to_dbm(compensate_norm(multipath_mag, a)))


def predict_rssi(net, grid: OccupancyGrid, tx: ArrayLike, rx: ArrayLike, cfg: RenderConfig,
                 los: bool = True, cache: dict | None = None) -> float:
    """End-to-end prediction: LOS sampling, rendering, LOS compensation."""
    tx_set = _cached(cache, grid, tx, TX, cfg)
    rx_set = _cached(cache, grid, rx, RX, cfg)
    mag, _ = render_rx(tx_set, rx_set, net, cfg)
    return los_compensate(mag, tx, rx, grid, cfg, enabled=los)


def _cached(cache, grid, pos, role, cfg) -> LosPointSet:
    if cache is None:
        return sample_los_points(grid, pos, role, cfg)
    key = (role, as_vec3(pos).tobytes())
    if key not in cache:
        cache[key] = sample_los_points(grid, pos, role, cfg)
    return cache[key]


# -- heatmaps ------------------------------------------------------------

NO_DATA = float("nan")


def heatmap(net, grid: OccupancyGrid, tx: ArrayLike, z: float, cfg: RenderConfig,
            spacing: float | None = None) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]:
    """Predicted dBm over a horizontal slice; occupied cells are NaN.

    Returns ``(values, xs, ys)`` with ``values[i, j]`` at ``(xs[i], ys[j], z)``.
    """
    tx = as_vec3(tx, "tx")
    lo, hi = grid.bounds_min, grid.bounds_max
    if not lo[2] <= z <= hi[2]:
        raise DomainError(f"z = {z} outside the scene height [{lo[2]}, {hi[2]}]")
    step = spacing or grid.resolution
    xs = lo[0] + step * (np.arange(int(round((hi[0] - lo[0]) / step))) + 0.5)
    ys = lo[1] + step * (np.arange(int(round((hi[1] - lo[1]) / step))) + 0.5)
    out = np.full((len(xs), len(ys)), NO_DATA)
    cache: dict = {}
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            p = np.array([x, y, z])
            if grid.is_occupied(p) or np.array_equal(p, tx):
                continue
            try:
                out[i, j] = predict_rssi(net, grid, tx, p, cfg, cache=cache)
            except DegenerateSceneError:
                continue
            cache = {k: v for k, v in cache.items() if k[0] == TX}
    return out, xs, ys


def write_heatmap(values: NDArray[np.float64], xs, ys, cfg: RenderConfig,
                  csv_path: str | Path, pgm_path: str | Path) -> None:
    """CSV of (x, y, dBm) rows plus an 8-bit PGM (floor -> 0, ref -> 255, no data -> 0)."""
    rows = ["x,y,rssi_dbm"]
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            v = values[i, j]
            rows.append(f"{x:.4f},{y:.4f},{'nan' if np.isnan(v) else f'{v:.4f}'}")
    Path(csv_path).write_text("\n".join(rows) + "\n")
    norm = np.nan_to_num(cfg.to_norm(values), nan=0.0)
    img = np.round(norm * 255).astype(np.uint8).T[::-1]  # rows = y, top = max y
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    Path(pgm_path).write_bytes(header + img.tobytes())
