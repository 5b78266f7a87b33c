"""Learned half of the hybrid model.

A multiresolution hash encoding feeds two MLPs: the attenuation network
maps an Rx point to a density and a feature vector, and the radiance network
maps that feature plus an encoded Tx point to an amplitude and phase.
Gradients are written out by hand for the fixed pipeline
forward -> render -> LOS compensation -> loss.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import propagation
from .errors import (DivergenceError, DomainError, IncompatibleCheckpointError,
                     NumericFaultError)
from .propagation import RX, TX, LosPointSet, RenderConfig
from .scene import OccupancyGrid, as_vec3

log = logging.getLogger(__name__)

PRIMES = (1, 2654435761, 805459861)
MAGIC = b"RMAPNET\x00"
CHECKPOINT_VERSION = 1


# -- hash encoding ---------------------------------------------------------

@dataclass(frozen=True)
class HashEncodingParams:
    levels: int = 8
    table_size: int = 2 ** 14
    features: int = 2
    base_resolution: int = 16
    finest_resolution: int = 512
    bounds_min: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bounds_max: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        T = self.table_size
        if T < 1 or T & (T - 1):
            raise DomainError(f"table_size must be a power of two, got {T}")
        if self.levels < 1 or self.features < 1:
            raise DomainError("levels and features must be >= 1")
        if not 1 <= self.base_resolution <= self.finest_resolution:
            raise DomainError("need 1 <= base_resolution <= finest_resolution")
        if not all(b > a for a, b in zip(self.bounds_min, self.bounds_max)):
            raise DomainError("bounds_max must exceed bounds_min on every axis")

    @property
    def resolutions(self) -> list[int]:
        if self.levels == 1:
            return [self.base_resolution]
        g = math.exp((math.log(self.finest_resolution) - math.log(self.base_resolution))
                     / (self.levels - 1))
        return [int(math.floor(self.base_resolution * g ** l + 1e-9)) for l in range(self.levels)]

    @property
    def out_dim(self) -> int:
        return self.levels * self.features


_CORNERS = np.array([[(c >> k) & 1 for k in range(3)] for c in range(8)], dtype=np.int64)


class HashEncoder:
    def __init__(self, params: HashEncodingParams, table: NDArray[np.float64] | None = None):
        self.params = params
        shape = (params.levels, params.table_size, params.features)
        self.table = np.zeros(shape) if table is None else np.asarray(table, dtype=np.float64)
        if self.table.shape != shape:
            raise DomainError(f"hash table shape {self.table.shape} != {shape}")
        lo = np.asarray(params.bounds_min, dtype=np.float64)
        hi = np.asarray(params.bounds_max, dtype=np.float64)
        self._lo = lo
        self._scale = float((hi - lo).max())
        self._ext = (hi - lo) / self._scale
        self._warned = False

    def _index(self, level: int, corners: NDArray[np.int64]) -> NDArray[np.int64]:
        T = self.params.table_size
        n = self.params.resolutions[level] + 1
        if n ** 3 <= T:
            return corners[..., 0] + n * (corners[..., 1] + n * corners[..., 2])
        c = corners.astype(np.uint64)
        h = (c[..., 0] * np.uint64(PRIMES[0])) ^ (c[..., 1] * np.uint64(PRIMES[1])) \
            ^ (c[..., 2] * np.uint64(PRIMES[2]))
        return (h & np.uint64(T - 1)).astype(np.int64)

    def locate(self, points: ArrayLike):
        """Corner table indices (L, P, 8) and trilinear weights (L, P, 8)."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        u = (p - self._lo) / self._scale
        clipped = np.clip(u, 0.0, self._ext)
        if not self._warned and np.any(clipped != u):
            log.debug("hash encoder: points outside the scene bounds were clamped")
            self._warned = True
        idx, wts = [], []
        for l, res in enumerate(self.params.resolutions):
            x = clipped * res
            base = np.floor(x).astype(np.int64)
            f = x - base
            corners = base[:, None, :] + _CORNERS[None]
            w = np.prod(np.where(_CORNERS[None] == 1, f[:, None, :], 1.0 - f[:, None, :]), axis=2)
            idx.append(self._index(l, corners))
            wts.append(w)
        return np.stack(idx), np.stack(wts)

    def encode(self, points: ArrayLike):
        """Features (P, L*F) and the lookup needed for :meth:`backward`."""
        idx, w = self.locate(points)
        L = self.params.levels
        feats = np.einsum("lpc,lpcf->plf", w, self.table[np.arange(L)[:, None, None], idx])
        return feats.reshape(len(feats), -1), (idx, w)

    def backward(self, grad: NDArray[np.float64], lookup) -> NDArray[np.float64]:
        idx, w = lookup
        L, T, F = self.table.shape
        g = grad.reshape(-1, L, F)
        flat = (idx + (np.arange(L) * T)[:, None, None]).ravel()
        out = np.empty((L * T, F))
        for f in range(F):
            contrib = w * g[:, :, f].T[:, :, None]  # (L, P, 8)
            out[:, f] = np.bincount(flat, weights=contrib.ravel(), minlength=L * T)
        return out.reshape(L, T, F)


def encode_position(encoder: HashEncoder, p: ArrayLike) -> NDArray[np.float64]:
    return encoder.encode(as_vec3(p)[None])[0][0]


# -- MLPs ------------------------------------------------------------------

class Mlp:
    """Dense layers with ReLU between them and a linear output."""

    def __init__(self, sizes: list[int], weights=None, biases=None):
        if len(sizes) < 2:
            raise DomainError("an MLP needs at least an input and an output size")
        self.sizes = list(sizes)
        self.W = weights if weights is not None else [np.zeros((a, b)) for a, b in zip(sizes, sizes[1:])]
        self.b = biases if biases is not None else [np.zeros(b) for b in sizes[1:]]
        for W, b, (i, o) in zip(self.W, self.b, zip(sizes, sizes[1:])):
            if W.shape != (i, o) or b.shape != (o,):
                raise DomainError(f"layer shapes {W.shape}/{b.shape} incompatible with {(i, o)}")

    def init(self, rng: np.random.Generator, final_scale: float = 1.0) -> "Mlp":
        for k, (i, o) in enumerate(zip(self.sizes, self.sizes[1:])):
            lim = math.sqrt(6.0 / i)
            scale = final_scale if k == len(self.W) - 1 else 1.0
            self.W[k] = rng.uniform(-lim, lim, (i, o)) * scale
            self.b[k] = np.zeros(o)
        return self

    def forward(self, x, start: int = 0):
        """Run layers ``start..`` on ``x``; returns (output, cache)."""
        cache = []
        for k in range(start, len(self.W)):
            z = x @ self.W[k] + self.b[k]
            cache.append((x, z))
            x = np.maximum(z, 0.0) if k < len(self.W) - 1 else z
        return x, cache

    def backward(self, g, cache, start: int = 0):
        """Accumulates nothing; returns (dW list, db list, grad wrt input) for layers ``start..``."""
        dW, db = [], []
        last = len(self.W) - 1
        for k in range(last, start - 1, -1):
            x, z = cache[k - start]
            if k < last:
                g = g * (z > 0)
            dW.append(x.T @ g)
            db.append(g.sum(axis=0))
            g = g @ self.W[k].T
        return dW[::-1], db[::-1], g


def _sign(x):
    return np.where(x >= 0, 1.0, -1.0)


# -- network ---------------------------------------------------------------

@dataclass(frozen=True)
class NetParams:
    encoding: HashEncodingParams = field(default_factory=HashEncodingParams)
    att_width: int = 128
    att_depth: int = 4
    feature_dim: int = 64
    rad_width: int = 128
    rad_depth: int = 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoding"]["bounds_min"] = list(self.encoding.bounds_min)
        d["encoding"]["bounds_max"] = list(self.encoding.bounds_max)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetParams":
        enc = dict(d["encoding"])
        enc["bounds_min"] = tuple(float(v) for v in enc["bounds_min"])
        enc["bounds_max"] = tuple(float(v) for v in enc["bounds_max"])
        return cls(HashEncodingParams(**enc), *(int(d[k]) for k in
                   ("att_width", "att_depth", "feature_dim", "rad_width", "rad_depth")))

    @classmethod
    def for_grid(cls, grid: OccupancyGrid, **kw) -> "NetParams":
        enc_kw = {k: kw.pop(k) for k in list(kw) if k in HashEncodingParams.__dataclass_fields__}
        enc = HashEncodingParams(bounds_min=tuple(float(v) for v in grid.bounds_min),
                                 bounds_max=tuple(float(v) for v in grid.bounds_max), **enc_kw)
        return cls(enc, **kw)


class MultipathNet:
    """Separate Tx/Rx hash encoders, attenuation MLP and radiance MLP."""

    def __init__(self, params: NetParams, seed: int = 0, zero_final: bool = False,
                 init: bool = True):
        if min(params.att_depth, params.rad_depth) < 1:
            raise DomainError("att_depth and rad_depth must be >= 1")
        self.params = params
        e = params.encoding
        self.tx_enc = HashEncoder(e)
        self.rx_enc = HashEncoder(e)
        D = e.out_dim
        self.att = Mlp([D] + [params.att_width] * params.att_depth + [1 + params.feature_dim])
        self.rad = Mlp([params.feature_dim + D] + [params.rad_width] * params.rad_depth + [2])
        if init:
            rng = np.random.default_rng(seed)
            self.tx_enc.table = rng.uniform(-1e-4, 1e-4, self.tx_enc.table.shape)
            self.rx_enc.table = rng.uniform(-1e-4, 1e-4, self.rx_enc.table.shape)
            self.att.init(rng, final_scale=0.0 if zero_final else 0.1)
            self.rad.init(rng, final_scale=0.0 if zero_final else 0.1)
            self.quantize()

    # parameters are exposed in a fixed declared order
    def named_params(self) -> list[tuple[str, NDArray[np.float64]]]:
        out = [("tx_table", self.tx_enc.table), ("rx_table", self.rx_enc.table)]
        for name, mlp in (("att", self.att), ("rad", self.rad)):
            for k in range(len(mlp.W)):
                out.append((f"{name}.W{k}", mlp.W[k]))
                out.append((f"{name}.b{k}", mlp.b[k]))
        return out

    def params_list(self) -> list[NDArray[np.float64]]:
        return [p for _, p in self.named_params()]

    def set_params(self, arrays) -> None:
        arrays = list(arrays)
        self.tx_enc.table, self.rx_enc.table = arrays[0], arrays[1]
        k = 2
        for mlp in (self.att, self.rad):
            for i in range(len(mlp.W)):
                mlp.W[i], mlp.b[i] = arrays[k], arrays[k + 1]
                k += 2

    def quantize(self) -> None:
        """Round every parameter to float32 precision (what checkpoints store)."""
        self.set_params([p.astype(np.float32).astype(np.float64) for p in self.params_list()])

    def copy(self) -> "MultipathNet":
        return copy.deepcopy(self)

    # -- forward ---------------------------------------------------------
    def _attenuation(self, rx_points):
        enc, lookup = self.rx_enc.encode(rx_points)
        out, cache = self.att.forward(enc)
        return out, (lookup, cache)

    def _radiance(self, feat, enc_tx):
        F = self.params.feature_dim
        W1, b1 = self.rad.W[0], self.rad.b[0]
        zf = feat @ W1[:F] + b1
        zt = enc_tx @ W1[F:]
        Z = zf[:, None, :] + zt[None, :, :]
        X = np.maximum(Z, 0.0).reshape(-1, Z.shape[2])
        out, cache = self.rad.forward(X, start=1)
        return out.reshape(Z.shape[0], Z.shape[1], 2), (Z, cache)

    def forward(self, p_tx: ArrayLike, p_rx: ArrayLike):
        """Single-pair evaluation: returns (delta, (re, im))."""
        p_tx, p_rx = as_vec3(p_tx, "p_tx"), as_vec3(p_rx, "p_rx")
        o, _ = self._attenuation(p_rx[None])
        enc_tx, _ = self.tx_enc.encode(p_tx[None])
        out, _ = self._radiance(o[:, 1:], enc_tx)
        delta = abs(float(o[0, 0]))
        a, th = abs(float(out[0, 0, 0])), float(out[0, 0, 1])
        if not all(map(math.isfinite, (delta, a, th))):
            raise NumericFaultError("non-finite network output")
        return delta, (a * math.cos(th), a * math.sin(th))

    def amplitude_phase(self, p_tx: ArrayLike, p_rx: ArrayLike) -> tuple[float, float]:
        """(a, theta) with theta wrapped to (-pi, pi]."""
        re, im = self.forward(p_tx, p_rx)[1]
        return math.hypot(re, im), math.atan2(im, re) if (re or im) else 0.0

    def field(self, tx_set: LosPointSet, rx_set: LosPointSet):
        """Density and Tx-weighted signal at every Rx sample, each (K, s)."""
        st = _FieldState.run(self, tx_set, rx_set)
        K, s = rx_set.sigma.shape
        return st.delta.reshape(K, s), st.S_re.reshape(K, s), st.S_im.reshape(K, s)


def _canonical_tx(tx_set: LosPointSet):
    # fixed summation order over Tx points regardless of input order
    order = np.lexsort(tx_set.points.T[::-1])
    return tx_set.points[order], tx_set.weights[order]


@dataclass
class _TxState:
    points: NDArray[np.float64]
    alpha: NDArray[np.float64]
    enc: NDArray[np.float64]
    lookup: tuple

    @classmethod
    def build(cls, net: MultipathNet, tx_set: LosPointSet) -> "_TxState":
        pts, alpha = _canonical_tx(tx_set)
        enc, lookup = net.tx_enc.encode(pts)
        return cls(pts, alpha, enc, lookup)


@dataclass
class _FieldState:
    """Forward intermediates of one (Tx set, Rx set) evaluation."""
    tx: _TxState
    o: NDArray[np.float64]
    att_cache: tuple
    raw: NDArray[np.float64]  # (N, J, 2)
    rad_cache: tuple
    delta: NDArray[np.float64]  # (N,)
    a: NDArray[np.float64]  # (N, J)
    cos: NDArray[np.float64]
    sin: NDArray[np.float64]
    S_re: NDArray[np.float64]  # (N,)
    S_im: NDArray[np.float64]

    @classmethod
    def run(cls, net: MultipathNet, tx_set: LosPointSet, rx_set: LosPointSet,
            tx: _TxState | None = None) -> "_FieldState":
        tx = tx or _TxState.build(net, tx_set)
        o, att_cache = net._attenuation(rx_set.samples.reshape(-1, 3))
        raw, rad_cache = net._radiance(o[:, 1:], tx.enc)
        a = np.abs(raw[:, :, 0])
        c, s = np.cos(raw[:, :, 1]), np.sin(raw[:, :, 1])
        wa = a * tx.alpha[None, :]
        return cls(tx, o, att_cache, raw, rad_cache, np.abs(o[:, 0]), a, c, s,
                   (wa * c).sum(axis=1), (wa * s).sum(axis=1))


# -- loss ------------------------------------------------------------------

@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 1e-4
    lr: float = 5e-4
    table_lr_scale: float = 1.0
    decay: str = "cosine"
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    clip_norm: float = 10.0
    los_compensation: bool = True
    reproducible: bool = True
    max_mean_signal: float = 1e3

    def __post_init__(self):
        if not self.lambda1 > 0 or self.lambda2 < 0:
            raise DomainError("need lambda1 > 0 and lambda2 >= 0")
        if self.decay not in ("cosine", "none"):
            raise DomainError(f"unknown decay schedule {self.decay!r}")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise DomainError("epochs >= 0, batch_size >= 1 and lr > 0 required")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


def loss(pred_norm, measured_norm, signals, cfg: TrainConfig):
    """(L_energy, L_decay, L_total) for a batch.

    L_energy is the mean squared error over measurements; L_decay is the
    mean signal magnitude over every evaluated Tx-Rx point pair.
    """
    pred = np.atleast_1d(np.asarray(pred_norm, dtype=np.float64))
    meas = np.atleast_1d(np.asarray(measured_norm, dtype=np.float64))
    mags = np.abs(np.asarray(signals)).ravel()
    L_e = float(np.mean((pred - meas) ** 2)) if pred.size else 0.0
    L_d = float(mags.mean()) if mags.size else 0.0
    return L_e, L_d, cfg.lambda1 * L_e + cfg.lambda2 * L_d


# -- gradients -------------------------------------------------------------

@dataclass
class Sample:
    """One training measurement with its cached LOS sets."""
    tx_key: bytes
    tx_set: LosPointSet
    rx_set: LosPointSet
    alpha_los: float
    target: float  # normalized


def _zero_grads(net: MultipathNet) -> list[NDArray[np.float64]]:
    return [np.zeros_like(p) for p in net.params_list()]


def batch_loss_and_grad(net: MultipathNet, batch: list[Sample], rcfg: RenderConfig,
                        tcfg: TrainConfig, want_grad: bool = True):
    """Mean loss terms and parameter gradients over ``batch``.

    Measurements sharing a transmitter reuse its encoding; accumulation
    runs in batch order.
    """
    grads = _zero_grads(net) if want_grad else None
    B = len(batch)
    pairs = sum(s.rx_set.sigma.size * len(s.tx_set.points) for s in batch)
    tx_states: dict[bytes, _TxState] = {}
    tx_grad: dict[bytes, NDArray[np.float64]] = {}
    sum_e, sum_d = 0.0, 0.0
    preds = []
    gains = rcfg.gains
    n_att = 2 * len(net.att.W)
    for smp in batch:
        tx = tx_states.get(smp.tx_key)
        if tx is None:
            tx = tx_states[smp.tx_key] = _TxState.build(net, smp.tx_set)
        st = _FieldState.run(net, smp.tx_set, smp.rx_set, tx)
        K, s = smp.rx_set.sigma.shape
        delta = st.delta.reshape(K, s)
        S_re, S_im = st.S_re.reshape(K, s), st.S_im.reshape(K, s)
        if not (np.all(np.isfinite(delta)) and np.all(np.isfinite(st.a)) and np.all(np.isfinite(st.raw))):
            raise NumericFaultError("non-finite network output during training")
        g_k = gains[smp.rx_set.ray_ids]
        res = propagation.combine(delta, S_re, S_im, smp.rx_set.sigma, g_k)
        mag = res.magnitude
        r = propagation.compensate_norm(mag, smp.alpha_los)
        preds.append(r)
        err = r - smp.target
        sum_e += err * err
        sum_d += float(st.a.sum())
        if not want_grad:
            continue
        # d L_total / d r, then back through compensation and |R|
        g_r = 2.0 * tcfg.lambda1 * err / B
        g_mag = g_r * (1.0 - smp.alpha_los) if 0.0 < mag < 1.0 else 0.0
        if mag > 0:
            gR_re, gR_im = g_mag * res.field.real / mag, g_mag * res.field.imag / mag
        else:
            gR_re = gR_im = 0.0
        gh_re, gh_im = g_k * gR_re, g_k * gR_im  # (K,)
        gS_re = (res.weights * gh_re[:, None]).ravel()
        gS_im = (res.weights * gh_im[:, None]).ravel()
        g_w = gh_re[:, None] * S_re + gh_im[:, None] * S_im
        g_delta = propagation.ray_weights_backward(g_w, delta, smp.rx_set.sigma,
                                                   res.weights, res.transmittance).ravel()
        alpha = tx.alpha[None, :]
        g_a = alpha * (gS_re[:, None] * st.cos + gS_im[:, None] * st.sin)
        g_a = g_a + tcfg.lambda2 / pairs
        g_th = alpha * st.a * (-gS_re[:, None] * st.sin + gS_im[:, None] * st.cos)
        g_raw = np.stack([g_a * _sign(st.raw[:, :, 0]), g_th], axis=2)
        # radiance tail, then the split first layer
        Z, rad_cache = st.rad_cache
        N, J, H = Z.shape
        dW, db, gX = net.rad.backward(g_raw.reshape(N * J, 2), rad_cache, start=1)
        gZ = gX.reshape(N, J, H) * (Z > 0)
        gZ_i = gZ.sum(axis=1)  # (N, H)
        gZ_j = gZ.sum(axis=0)  # (J, H)
        F = net.params.feature_dim
        feat = st.o[:, 1:]
        W1 = net.rad.W[0]
        base = 2 + n_att
        grads[base][:F] += feat.T @ gZ_i
        grads[base][F:] += tx.enc.T @ gZ_j
        grads[base + 1] += gZ_i.sum(axis=0)
        for k in range(1, len(net.rad.W)):
            grads[base + 2 * k] += dW[k - 1]
            grads[base + 2 * k + 1] += db[k - 1]
        g_enc_tx = gZ_j @ W1[F:].T
        tx_grad[smp.tx_key] = tx_grad.get(smp.tx_key, 0.0) + g_enc_tx
        # attenuation network and Rx encoder
        g_o = np.concatenate([(g_delta * _sign(st.o[:, 0]))[:, None], gZ_i @ W1[:F].T], axis=1)
        lookup, att_cache = st.att_cache
        dW, db, g_enc_rx = net.att.backward(g_o, att_cache)
        for k in range(len(net.att.W)):
            grads[2 + 2 * k] += dW[k]
            grads[3 + 2 * k] += db[k]
        grads[1] += net.rx_enc.backward(g_enc_rx, lookup)
    if want_grad:
        for key, g in tx_grad.items():
            grads[0] += net.tx_enc.backward(g, tx_states[key].lookup)
    L_e = sum_e / B
    L_d = sum_d / pairs if pairs else 0.0
    L_t = tcfg.lambda1 * L_e + tcfg.lambda2 * L_d
    return (L_e, L_d, L_t), grads, np.array(preds)


# -- training --------------------------------------------------------------

class LosCache:
    """LOS point sets keyed by (role, exact position)."""

    def __init__(self, grid: OccupancyGrid, cfg: RenderConfig):
        self.grid, self.cfg = grid, cfg
        self._sets: dict = {}

    def get(self, pos, role) -> LosPointSet:
        key = (role, as_vec3(pos).tobytes())
        hit = self._sets.get(key)
        if hit is None:
            hit = self._sets[key] = propagation.sample_los_points(self.grid, pos, role, self.cfg)
        return hit

    def __len__(self):
        return len(self._sets)


def make_samples(dataset, grid: OccupancyGrid, rcfg: RenderConfig, cache: LosCache | None = None,
                 los_compensation: bool = True) -> list[Sample]:
    cache = cache or LosCache(grid, rcfg)
    out = []
    for m in dataset.measurements:
        a = propagation.los_factor(grid, m.tx, m.rx, rcfg) if los_compensation else 0.0
        out.append(Sample(as_vec3(m.tx).tobytes(), cache.get(m.tx, TX), cache.get(m.rx, RX),
                          a, float(rcfg.to_norm(m.rssi_dbm))))
    return out


@dataclass
class EpochRecord:
    epoch: int
    L_energy: float
    L_decay: float
    L_total: float
    wall_time: float
    mean_signal: float


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr, scales=None):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            step = lr * (scales[i] if scales else 1.0)
            out.append(p - step * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


def train(net: MultipathNet, dataset, grid: OccupancyGrid, render_cfg: RenderConfig,
          train_cfg: TrainConfig, cache: LosCache | None = None,
          callback: Callable[[EpochRecord], None] | None = None):
    """Fit the network to a dataset; returns (net, history).

    Raises :class:`DivergenceError` carrying the last good network if the
    loss stops being finite. The returned network is float32-exact.
    """
    if len(dataset) == 0:
        raise DomainError("cannot train on an empty dataset")
    lo, hi = grid.bounds_min, grid.bounds_max
    pts = np.concatenate([dataset.tx, dataset.rx])
    if np.any(pts < lo) or np.any(pts > hi):
        raise DomainError("dataset contains positions outside the scene bounds")
    t0 = time.perf_counter()
    samples = make_samples(dataset, grid, render_cfg, cache, train_cfg.los_compensation)
    rng = np.random.default_rng(train_cfg.seed)
    params = net.params_list()
    opt = Adam(params, train_cfg.lr)
    scales = [train_cfg.table_lr_scale] * 2 + [1.0] * (len(params) - 2)
    B = train_cfg.batch_size
    steps_per_epoch = math.ceil(len(samples) / B)
    total_steps = max(1, steps_per_epoch * train_cfg.epochs)
    history: list[EpochRecord] = []
    good = net.copy()
    step = 0
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(samples))
        acc = np.zeros(3)
        for k in range(0, len(order), B):
            batch = [samples[i] for i in order[k:k + B]]
            try:
                terms, grads, _ = batch_loss_and_grad(net, batch, render_cfg, train_cfg)
            except NumericFaultError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}", good) from exc
            if not all(map(math.isfinite, terms)):
                raise DivergenceError(f"epoch {epoch}: loss is not finite", good)
            acc += np.array(terms) * len(batch)
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if train_cfg.clip_norm and norm > train_cfg.clip_norm:
                grads = [g * (train_cfg.clip_norm / norm) for g in grads]
            lr = train_cfg.lr
            if train_cfg.decay == "cosine":
                lr *= 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            net.set_params(opt.step(net.params_list(), grads, lr, scales))
            step += 1
        L_e, L_d, L_t = acc / len(samples)
        mean_signal = L_d
        if not all(map(math.isfinite, (L_e, L_d, L_t))) or mean_signal > train_cfg.max_mean_signal:
            raise DivergenceError(f"epoch {epoch}: training diverged (mean |S| = {mean_signal:.3g})",
                                  good)
        rec = EpochRecord(epoch, float(L_e), float(L_d), float(L_t),
                          time.perf_counter() - t0, float(mean_signal))
        history.append(rec)
        good = net.copy()
        if callback:
            callback(rec)
    net.quantize()
    return net, history


def write_history_csv(history: list[EpochRecord], path: str | Path, append: bool = False) -> None:
    path = Path(path)
    lines = [] if append and path.exists() else ["epoch,L_energy,L_decay,L_total,wall_time"]
    for r in history:
        lines.append(f"{r.epoch},{r.L_energy:.9g},{r.L_decay:.9g},{r.L_total:.9g},{r.wall_time:.3f}")
    with open(path, "a" if append and path.exists() else "w") as fh:
        fh.write("\n".join(lines) + "\n")


# -- gradient check ------------------------------------------------------

def _kink_signature(net: MultipathNet, batch: list[Sample], rcfg: RenderConfig) -> bytes:
    """Signs of every piecewise-linear switch the batch passes through."""
    parts = []
    for smp in batch:
        st = _FieldState.run(net, smp.tx_set, smp.rx_set)
        parts.append(np.packbits(st.o[:, 0] >= 0))
        parts.append(np.packbits(st.raw[:, :, 0] >= 0))
        parts.append(np.packbits(st.rad_cache[0] > 0))
        for _, z in st.att_cache[1] + st.rad_cache[1]:
            parts.append(np.packbits(z > 0))
        K, s = smp.rx_set.sigma.shape
        res = propagation.combine(st.delta.reshape(K, s), st.S_re.reshape(K, s),
                                  st.S_im.reshape(K, s), smp.rx_set.sigma, rcfg.gains[smp.rx_set.ray_ids])
        parts.append(np.array([0 < res.magnitude < 1], dtype=np.uint8))
    return b"".join(p.tobytes() for p in parts)


def grad_check(net: MultipathNet, render_cfg: RenderConfig, trial_count: int = 100,
               grid: OccupancyGrid | None = None, batch: list[Sample] | None = None,
               train_cfg: TrainConfig | None = None, step: float = 1e-4, seed: int = 0,
               report: list | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes are drawn from parameters with a nonzero analytic gradient
    (hash-table entries included), topped up with random parameters. A
    probe whose +/- step crosses a piecewise-linear switch is redrawn.
    Relative error uses max(|analytic|, |numeric|, 1e-6) as denominator.
    """
    from .scenes import empty_room

    tcfg = train_cfg or TrainConfig(lambda2=0.05)
    if batch is None:
        grid = grid or empty_room(size=(3.0, 3.0), height=2.5)
        cache = LosCache(grid, render_cfg)
        pts = [(0.8, 0.9, 1.1), (2.1, 1.9, 1.3), (1.2, 2.2, 0.9)]
        batch = []
        for k, (a, b) in enumerate([(0, 1), (0, 2), (1, 2)]):
            tx, rx = np.array(pts[a]), np.array(pts[b])
            batch.append(Sample(tx.tobytes(), cache.get(tx, TX), cache.get(rx, RX),
                                propagation.los_factor(grid, tx, rx, render_cfg), 0.3 + 0.2 * k))
    work = net.copy()
    params = work.params_list()
    _, grads, _ = batch_loss_and_grad(work, batch, render_cfg, tcfg)
    rng = np.random.default_rng(seed)
    nz = [(i, j) for i, g in enumerate(grads) for j in np.flatnonzero(g.ravel())]
    sizes = [p.size for p in params]
    worst = 0.0
    done, attempts = 0, 0
    while done < trial_count and attempts < trial_count * 20:
        attempts += 1
        if nz and rng.random() < 0.8:
            i, j = nz[int(rng.integers(len(nz)))]
        else:
            i = int(rng.integers(len(params)))
            j = int(rng.integers(sizes[i]))
        flat = params[i].reshape(-1)
        orig = flat[j]
        vals = []
        sigs = []
        for sgn in (1.0, -1.0):
            flat[j] = orig + sgn * step
            sigs.append(_kink_signature(work, batch, render_cfg))
            vals.append(batch_loss_and_grad(work, batch, render_cfg, tcfg, want_grad=False)[0][2])
        flat[j] = orig
        if sigs[0] != sigs[1]:
            continue
        num = (vals[0] - vals[1]) / (2 * step)
        ana = float(grads[i].reshape(-1)[j])
        if ana == 0.0 and num == 0.0:
            err = 0.0
        else:
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
        if report is not None:
            report.append((work.named_params()[i][0], int(j), ana, num, err))
        worst = max(worst, err)
        done += 1
    return worst


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(net: MultipathNet, path: str | Path, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header, float32 LE tensors."""
    named = net.named_params()
    header = {"params": net.params.to_dict(),
              "tensors": [[name, list(arr.shape)] for name, arr in named],
              "extra": extra or {}}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
        fh.write(hb)
        for _, arr in named:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint_header(path: str | Path) -> dict:
    return _read(path)[0]


def _read(path):
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise IncompatibleCheckpointError(f"{path}: not a radiomap checkpoint")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off = len(MAGIC) + 8
    if len(data) < off + hlen:
        raise IncompatibleCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[off:off + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise IncompatibleCheckpointError(f"{path}: corrupt header: {exc}") from exc
    return header, data[off + hlen:]


def load_checkpoint(path: str | Path, like: NetParams | None = None) -> MultipathNet:
    """Load a checkpoint; with ``like`` given, hyperparameters must match it."""
    header, body = _read(path)
    try:
        params = NetParams.from_dict(header["params"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IncompatibleCheckpointError(f"{path}: bad hyperparameters: {exc}") from exc
    if like is not None:
        _compare(like.to_dict(), params.to_dict(), "")
    net = MultipathNet(params, init=False)
    expected = net.named_params()
    declared = header.get("tensors", [])
    if [n for n, _ in declared] != [n for n, _ in expected]:
        raise IncompatibleCheckpointError(f"{path}: tensor list does not match the architecture")
    arrays, off = [], 0
    for (name, shape), (_, ref) in zip(declared, expected):
        if tuple(shape) != ref.shape:
            raise IncompatibleCheckpointError(
                f"{path}: tensor {name} has shape {tuple(shape)}, architecture needs {ref.shape}")
        nbytes = 4 * ref.size
        if off + nbytes > len(body):
            raise IncompatibleCheckpointError(f"{path}: truncated at tensor {name}")
        arrays.append(np.frombuffer(body, dtype="<f4", count=ref.size, offset=off)
                      .astype(np.float64).reshape(ref.shape))
        off += nbytes
    if off != len(body):
        raise IncompatibleCheckpointError(f"{path}: {len(body) - off} trailing bytes")
    net.set_params(arrays)
    net.extra = header.get("extra", {})
    return net


def _compare(want, got, prefix):
    for k in want:
        name = f"{prefix}{k}"
        if isinstance(want[k], dict):
            _compare(want[k], got.get(k, {}), name + ".")
        elif want[k] != got.get(k):
            raise IncompatibleCheckpointError(
                f"checkpoint field {name} = {got.get(k)!r}, expected {want[k]!r}")
