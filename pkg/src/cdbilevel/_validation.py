"""Input validation helpers shared by the solver and estimator layers."""
from __future__ import annotations

import numbers

import numpy as np


def check_vector(v, dim=None, name="vector"):
    """Return ``v`` as a finite float64 1-d array, optionally of length ``dim``."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} must have length {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


def check_scalar(value, name, *, min_val=None, max_val=None,
                 include_min=True, include_max=True):
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise TypeError(f"{name} must be a real number, got {value!r}")
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"{name} must be finite")
    if min_val is not None:
        if value < min_val or (not include_min and value == min_val):
            op = ">=" if include_min else ">"
            raise ValueError(f"{name} must be {op} {min_val}, got {value}")
    if max_val is not None:
        if value > max_val or (not include_max and value == max_val):
            op = "<=" if include_max else "<"
            raise ValueError(f"{name} must be {op} {max_val}, got {value}")
    return value


def check_count(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_random_state(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
