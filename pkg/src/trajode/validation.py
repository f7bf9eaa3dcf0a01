"""Input validation shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .errors import DataError, DimensionError


def check_codes(X, dim: int | None = None) -> np.ndarray:
    """A finite float64 (N, d) matrix of latent codes."""
    try:
        X = check_array(X, dtype=np.float64, ensure_2d=True)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if dim is not None and X.shape[1] != dim:
        raise DimensionError(f"codes have {X.shape[1]} features, expected {dim}")
    return X


def check_targets(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] != n:
        raise DimensionError(f"targets must be (N={n}, m), got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise DataError("targets contain non-finite values")
    return y


def check_trajectories(X, height=None, width=None) -> np.ndarray:
    """A finite float64 stack of subjects: (S, L, H, W) or (S, G, T, H, W)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim not in (4, 5):
        raise DimensionError(f"expected (S, L, H, W) or (S, G, T, H, W) frames, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("frames contain non-finite values")
    if height is not None and X.shape[-2:] != (height, width):
        raise DimensionError(f"frames are {X.shape[-2:]}, model expects {(height, width)}")
    return X
