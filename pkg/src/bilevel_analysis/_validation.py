"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numpy as np


def check_images(X, name: str = "X", min_side: int = 1) -> np.ndarray:
    """Return ``X`` as a float64 stack of square images ``(T, N, N)``.

    A single ``(N, N)`` image is promoted to a stack of one.
    """
    try:
        arr = np.asarray(X, dtype=np.float64)
    except (TypeError, ValueError) as err:
        raise ValueError(f"{name} must be numeric image data") from err
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ValueError(f"{name} must have shape (T, N, N) or (N, N), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} contains no images")
    if arr.shape[1] < min_side:
        raise ValueError(f"{name}: image side {arr.shape[1]} is below the minimum {min_side}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_pairs(X, y, min_side: int = 1):
    X = check_images(X, "X", min_side)
    y = check_images(y, "y", min_side)
    if X.shape != y.shape:
        raise ValueError(f"X and y shapes differ: {X.shape} vs {y.shape}")
    return X, y


def check_positive(value, name: str, allow_zero: bool = False) -> float:
    value = float(value)
    ok = value >= 0 if allow_zero else value > 0
    if not ok or not np.isfinite(value):
        bound = ">= 0" if allow_zero else "> 0"
        raise ValueError(f"{name} must be finite and {bound}, got {value}")
    return value
