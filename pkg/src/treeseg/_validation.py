"""Shared argument-checking helpers."""

from __future__ import annotations

import numbers

import numpy as np


def check_positive(name, value):
    """Raise ValueError unless ``value`` is a finite number > 0."""
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


def check_in_range(name, value, lo, hi):
    """Raise ValueError unless ``lo <= value <= hi``."""
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite number, got {value!r}")
    if not (lo <= value <= hi):
        raise ValueError(f"{name} must lie in [{lo}, {hi}], got {value}")
    return float(value)


def check_int_in_range(name, value, lo, hi):
    """Raise ValueError unless ``value`` is an integer with ``lo <= value <= hi``."""
    if not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if not (lo <= value <= hi):
        raise ValueError(f"{name} must lie in [{lo}, {hi}], got {value}")
    return int(value)


def check_odd(name, value):
    """Raise ValueError unless ``value`` is an odd integer."""
    if not isinstance(value, numbers.Integral) or value % 2 == 0:
        raise ValueError(f"{name} must be an odd integer, got {value!r}")
    return int(value)


def as_xy_array(points):
    """Coerce to a (n, 2) float64 array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected (n, 2) coordinates, got shape {arr.shape}")
    return arr


def as_xyz_array(points):
    """Coerce to a (n, 3) float64 array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected (n, 3) coordinates, got shape {arr.shape}")
    return arr
