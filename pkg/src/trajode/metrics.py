"""Spatial correlation, seed-based temporal correlation maps, NRMSE."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, UndefinedMetricError

NRMSE_NORMALIZER = "range"


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    r = float(xc @ yc / np.sqrt((xc @ xc) * (yc @ yc)))
    return min(1.0, max(-1.0, r))


def _is_constant(x: np.ndarray) -> bool:
    return bool(np.all(x == x.flat[0]))


def spatial_correlation(X, Y) -> float:
    """Pearson correlation between two images, both vectorized."""
    x = np.asarray(X, dtype=np.float64).ravel()
    y = np.asarray(Y, dtype=np.float64).ravel()
    if np.shape(X) != np.shape(Y):
        raise DimensionError(f"images have shapes {np.shape(X)} and {np.shape(Y)}")
    if x.size < 2:
        raise DimensionError("spatial correlation needs at least 2 pixels")
    if _is_constant(x) or _is_constant(y):
        raise UndefinedMetricError("spatial correlation undefined for a constant image")
    return _pearson(x, y)


@dataclass
class CorrelationSeries:
    """Per-frame correlations. Undefined entries are 0 with ``defined`` False."""

    values: np.ndarray
    defined: np.ndarray
    times: np.ndarray

    @property
    def mean(self) -> float:
        if not self.defined.any():
            raise UndefinedMetricError("no defined correlation in series")
        return float(self.values[self.defined].mean())

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "corr", "defined"])
            for t, v, ok in zip(self.times, self.values, self.defined):
                w.writerow([int(t), repr(float(v)), int(bool(ok))])


def correlation_series(pred, truth, times=None) -> CorrelationSeries:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if len(pred) != len(truth):
        raise DimensionError(f"sequence lengths differ: {len(pred)} vs {len(truth)}")
    values = np.zeros(len(pred))
    defined = np.ones(len(pred), dtype=bool)
    for i, (p, t) in enumerate(zip(pred, truth)):
        try:
            values[i] = spatial_correlation(p, t)
        except UndefinedMetricError:
            defined[i] = False
    times = np.arange(len(pred)) if times is None else np.asarray(times)
    return CorrelationSeries(values, defined, times)


def batch_spatial_correlation(pred, truth) -> np.ndarray:
    """Vectorized correlations over the leading axes of (..., H, W) stacks.

    Constant frames yield NaN here; callers decide how to treat them.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    n = pred.shape[-1] * pred.shape[-2]
    p = pred.reshape(-1, n)
    t = truth.reshape(-1, n)
    p = p - p.mean(axis=1, keepdims=True)
    t = t - t.mean(axis=1, keepdims=True)
    denom = np.sqrt((p * p).sum(1) * (t * t).sum(1))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (p * t).sum(1) / denom
    r = np.where(denom > 0, np.clip(r, -1.0, 1.0), np.nan)
    return r.reshape(pred.shape[:-2])


@dataclass
class TemporalCorrelationMap:
    seed: tuple[int, int]
    values: np.ndarray
    defined: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed_row", self.seed[0], "seed_col", self.seed[1]])
            for row in self.values:
                w.writerow([repr(float(v)) for v in row])


def temporal_correlation_map(frames, seed) -> TemporalCorrelationMap:
    """Correlate every pixel's time series with the series at ``seed = (row, col)``."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise DimensionError("temporal correlation needs a (N>=2, H, W) frame stack")
    r, c = int(seed[0]), int(seed[1])
    _, H, W = frames.shape
    if not (0 <= r < H and 0 <= c < W):
        raise DimensionError(f"seed {seed} outside {H}x{W} frame")
    s = frames[:, r, c]
    if _is_constant(s):
        raise UndefinedMetricError(f"seed series at {seed} is constant")
    s = s - s.mean()
    X = frames.reshape(frames.shape[0], -1)
    Xc = X - X.mean(axis=0)
    defined = ~np.all(X == X[0], axis=0)
    denom = np.sqrt((Xc * Xc).sum(0) * (s @ s))
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = (s @ Xc) / denom
    vals = np.where(defined, np.clip(vals, -1.0, 1.0), 0.0)
    vals = vals.reshape(H, W)
    vals[r, c] = 1.0
    return TemporalCorrelationMap((r, c), vals, defined.reshape(H, W))


def nrmse(pred, truth) -> float:
    """Root-mean-squared error divided by the range of ``truth``."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape or truth.size < 2:
        raise DimensionError("nrmse needs equal-length vectors of length >= 2")
    span = float(truth.max() - truth.min())
    if span == 0.0:
        raise UndefinedMetricError("nrmse undefined: target is constant")
    return float(np.sqrt(np.mean((pred - truth) ** 2)) / span)
