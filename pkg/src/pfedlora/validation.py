"""Input validation helpers shared by the estimators and the functional API."""

from __future__ import annotations

import math
from collections.abc import Iterable

import numpy as np

from .exceptions import ConfigError, DataError, NotFittedError


def check_matrix(x, name: str = "matrix") -> np.ndarray:
    """Return ``x`` as a finite 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ConfigError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} contains NaN or Inf")
    return arr


def check_same_shape(*arrays, names: Iterable[str] | None = None) -> None:
    shapes = [np.shape(a) for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(names) if names else "operands"
        raise ConfigError(f"shape mismatch between {label}: {shapes}")


def check_fraction(value, name: str, *, closed_upper: bool = True) -> float:
    value = float(value)
    ok = 0.0 <= value <= 1.0 if closed_upper else 0.0 <= value < 1.0
    if not ok or math.isnan(value):
        bound = "[0, 1]" if closed_upper else "[0, 1)"
        raise ConfigError(f"{name} must lie in {bound}, got {value}")
    return value


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or int(value) != value or int(value) < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_tokens(tokens, vocab_size: int) -> np.ndarray:
    arr = np.asarray(tokens)
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise DataError("token ids must be integers")
    arr = arr.astype(np.int64, copy=False)
    if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        raise DataError(f"token id out of range [0, {vocab_size})")
    return arr


def check_is_fitted(estimator, attributes: str | Iterable[str]) -> None:
    if isinstance(attributes, str):
        attributes = [attributes]
    missing = [a for a in attributes if not hasattr(estimator, a)]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )
