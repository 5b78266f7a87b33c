"""Reference predictors the hybrid model is compared against."""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from .errors import DomainError


def mae(pred: ArrayLike, truth: ArrayLike) -> float:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DomainError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise DomainError("MAE of an empty set")
    return float(np.mean(np.abs(pred - truth)))


class LogDistanceFit:
    """Least-squares fit of ``rssi = A - 10 n log10(max(d, d0) / d0)``."""

    def __init__(self, d0: float = 1.0):
        self.d0 = d0
        self.intercept = 0.0
        self.exponent = 0.0

    def _x(self, tx, rx):
        d = np.linalg.norm(np.asarray(rx, dtype=np.float64) - np.asarray(tx, dtype=np.float64), axis=-1)
        return -10.0 * np.log10(np.maximum(d, self.d0) / self.d0)

    def fit(self, tx: ArrayLike, rx: ArrayLike, rssi: ArrayLike) -> "LogDistanceFit":
        x = self._x(tx, rx)
        y = np.asarray(rssi, dtype=np.float64)
        if len(y) < 2:
            raise DomainError("log-distance fit needs at least 2 measurements")
        X = np.stack([np.ones_like(x), x], axis=1)
        (self.intercept, self.exponent), *_ = np.linalg.lstsq(X, y, rcond=None)
        return self

    def predict(self, tx: ArrayLike, rx: ArrayLike) -> NDArray[np.float64]:
        return self.intercept + self.exponent * self._x(tx, rx)


class NearestNeighbor:
    """Value of the training record closest in concatenated (tx, rx) space."""

    def fit(self, tx: ArrayLike, rx: ArrayLike, rssi: ArrayLike) -> "NearestNeighbor":
        keys = np.hstack([np.asarray(tx, dtype=np.float64), np.asarray(rx, dtype=np.float64)])
        if len(keys) == 0:
            raise DomainError("nearest-neighbor baseline needs training data")
        self._tree = cKDTree(keys)
        self._values = np.asarray(rssi, dtype=np.float64)
        return self

    def predict(self, tx: ArrayLike, rx: ArrayLike) -> NDArray[np.float64]:
        q = np.hstack([np.asarray(tx, dtype=np.float64), np.asarray(rx, dtype=np.float64)])
        _, idx = self._tree.query(q)
        return self._values[idx]


def baseline_maes(train, test, d0: float = 1.0) -> dict[str, float]:
    """MAE (dBm) of both baselines fitted on ``train`` and scored on ``test``."""
    ld = LogDistanceFit(d0).fit(train.tx, train.rx, train.rssi)
    nn = NearestNeighbor().fit(train.tx, train.rx, train.rssi)
    return {"log_distance": mae(ld.predict(test.tx, test.rx), test.rssi),
            "nearest_neighbor": mae(nn.predict(test.tx, test.rx), test.rssi)}
