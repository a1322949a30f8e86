"""Input validation helpers shared across the package.

All helpers raise :class:`~sglmm.exceptions.InputError` on invalid input and
return validated (possibly copied) numpy arrays, so downstream numerical code
can assume clean shapes and finite values.
"""

from __future__ import annotations

import numpy as np

from .exceptions import InputError


def as_float_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    """Coerce to a float64 array and require finite entries."""
    arr = np.asarray(x, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise InputError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


def check_coordinates(coords, *, name: str = "coords") -> np.ndarray:
    """Validate an (n, 2) planar coordinate array."""
    arr = np.asarray(coords, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InputError(f"{name} must have shape (n, 2), got {arr.shape}")
    if arr.shape[0] < 1:
        raise InputError(f"{name} must contain at least one point")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


def check_design(X, n: int | None = None, *, name: str = "X") -> np.ndarray:
    """Validate a full-column-rank design matrix."""
    arr = as_float_array(X, name, ndim=2)
    if n is not None and arr.shape[0] != n:
        raise InputError(f"{name} has {arr.shape[0]} rows, expected {n}")
    if arr.shape[0] < arr.shape[1]:
        raise InputError(f"{name} has more columns than rows")
    if np.linalg.matrix_rank(arr) < arr.shape[1]:
        raise InputError(f"{name} is rank-deficient")
    return arr


def check_positive_scalar(value, name: str) -> float:
    val = float(value)
    if not np.isfinite(val) or val <= 0:
        raise InputError(f"{name} must be a positive finite scalar, got {value!r}")
    return val


def check_vector(x, n: int | None = None, *, name: str = "x") -> np.ndarray:
    arr = as_float_array(x, name, ndim=1)
    if n is not None and arr.shape[0] != n:
        raise InputError(f"{name} has length {arr.shape[0]}, expected {n}")
    return arr
