"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numbers
import os

import numpy as np


def check_positive_int(value, name):
    if not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_non_negative(value, name):
    if not isinstance(value, numbers.Real) or value < 0:
        raise ValueError(f"{name} must be non-negative, got {value!r}")
    return float(value)


def check_fraction(value, name):
    if not isinstance(value, numbers.Real) or not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie strictly in (0, 1), got {value!r}")
    return float(value)


def check_finite_array(arr, name):
    arr = np.asarray(arr, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_choice(value, choices, name):
    if value not in choices:
        raise ValueError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def worker_count():
    """Worker cap from S2META_THREADS (0 or unset = auto)."""
    raw = os.environ.get("S2META_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"S2META_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError(f"S2META_THREADS must be >= 0, got {n}")
    if n == 0:
        return os.cpu_count() or 1
    return n
