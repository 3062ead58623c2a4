"""Input checks shared by the estimators and the numeric core."""

from __future__ import annotations

import numpy as np
import torch


class NumericError(FloatingPointError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, what: str):
        super().__init__(f"non-finite values in {what}")
        self.what = what


class ShapeError(ValueError):
    pass


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NumericError(what)
    return x


def check_windows(X, n_features: int | None = None, window_length: int | None = None) -> np.ndarray:
    """Validate a ``(n_samples, L, D)`` window array; 2D input is read as ``L = 1``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, None, :]
    if X.ndim != 3:
        raise ShapeError(f"expected (n_samples, L, D) windows, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ShapeError("need at least one sample")
    if not np.isfinite(X).all():
        raise ValueError("input windows contain NaN or infinity")
    if n_features is not None and X.shape[2] != n_features:
        raise ShapeError(f"expected {n_features} feature channels, got {X.shape[2]}")
    if window_length is not None and X.shape[1] != window_length:
        raise ShapeError(f"expected window length {window_length}, got {X.shape[1]}")
    return X


def check_coords(coords, n: int) -> tuple[np.ndarray, np.ndarray]:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape != (n, 2):
        raise ShapeError(f"coords must be (n_samples, 2) lon/lat, got {coords.shape}")
    if not np.isfinite(coords).all():
        raise ValueError("coords contain NaN or infinity")
    return coords[:, 0], coords[:, 1]


def check_t_index(t_index, n: int) -> np.ndarray:
    t = np.asarray(t_index)
    if t.shape != (n,):
        raise ShapeError(f"t_index must have shape ({n},), got {t.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(np.mod(t, 1) == 0):
            raise ValueError("t_index must hold integers")
    t = t.astype(np.int64)
    if (t < 0).any():
        raise ValueError("t_index must be non-negative")
    return t


def check_target(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape != (n,):
        raise ShapeError(f"y must have {n} entries, got {y.shape[0]}")
    if not np.isfinite(y).all():
        raise ValueError("y contains NaN or infinity")
    return y
