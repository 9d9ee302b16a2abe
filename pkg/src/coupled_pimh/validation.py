"""Input validation helpers for the estimator layer."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils import check_array

from .models import ObservationSeries


def check_observations(y) -> ObservationSeries:
    """Coerce ``y`` (``(T,)``, ``(T, d_y)`` or an :class:`ObservationSeries`) to a validated series."""
    if isinstance(y, ObservationSeries):
        return y
    arr = check_array(y, ensure_2d=False, dtype=np.float64, ensure_all_finite=True, input_name="y")
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"y must be 1-d or 2-d, got {arr.ndim} dimensions")
    return ObservationSeries(arr)


def check_count(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be at least {minimum}, got {value}")
    return int(value)


def check_k_m(k, m) -> tuple[int, int]:
    k = check_count(k, "k", 0)
    m = check_count(m, "m", 0)
    if k > m:
        raise ValueError(f"need k <= m, got k={k}, m={m}")
    return k, m


def check_positive(value, name: str) -> float:
    value = float(value)
    if not (np.isfinite(value) and value > 0):
        raise ValueError(f"{name} must be positive and finite, got {value}")
    return value


def check_seed(random_state) -> int:
    """Master seed for replicate streams; ``None`` draws fresh entropy."""
    if random_state is None:
        return int(np.random.SeedSequence().entropy)
    return check_count(random_state, "random_state", 0)
