"""Input validation helpers shared by the estimators."""

from __future__ import annotations

from typing import Iterable

import numpy as np
from sklearn.utils.validation import check_array


def as_weight_vector(X, allow_empty: bool = False) -> np.ndarray:
    """Coerce a 1-D sequence or single-column 2-D array of weights to a float vector."""
    arr = np.asarray(X, dtype=float)
    if arr.size == 0:
        if allow_empty:
            return arr.reshape(-1)
        raise ValueError("expected at least one weight")
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    arr = check_array(arr, ensure_2d=True, dtype=float, ensure_all_finite=True)
    if arr.shape[1] != 1:
        raise ValueError(f"expected a single column of weights, got shape {arr.shape}")
    return arr[:, 0]


def check_probability(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def as_text_list(X: Iterable, name: str = "X") -> list[str]:
    if isinstance(X, str):
        raise TypeError(f"{name} must be an iterable of strings, not a single string")
    out = list(X)
    for item in out:
        if not isinstance(item, str):
            raise TypeError(f"{name} must contain strings, got {type(item).__name__}")
    return out
