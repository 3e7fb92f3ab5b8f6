"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numbers

import numpy as np

from .data import BehaviorLog, SegmentedHistory, segment


def check_log(X) -> BehaviorLog:
    """Accept a :class:`BehaviorLog` or an ``(n, 3)`` integer array of (user, item, timestamp)."""
    if isinstance(X, BehaviorLog):
        return X
    arr = np.asarray(X)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) array of (user, item, timestamp), got shape {arr.shape}")
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or not np.all(arr == np.round(arr)):
            raise ValueError("log entries must be integers")
    elif arr.dtype.kind not in "iu":
        raise ValueError(f"log entries must be integers, got dtype {arr.dtype}")
    return BehaviorLog.from_array(arr.astype(np.int64))


def check_histories(X, window_t, split=True) -> list:
    """Segment ``X`` unless it already is a list of :class:`SegmentedHistory`."""
    if isinstance(X, (list, tuple)) and X and all(isinstance(h, SegmentedHistory) for h in X):
        for h in X:
            if h.segments.shape[1] != window_t:
                raise ValueError(f"history for user {h.user} uses window {h.segments.shape[1]}, "
                                 f"estimator expects {window_t}")
        return list(X)
    hist = segment(check_log(X), window_t, split=split)
    if not hist:
        raise ValueError("no usable user histories")
    return hist


def check_count(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_fraction(value, name):
    if not isinstance(value, numbers.Real) or not 0.0 <= float(value) <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
    return float(value)
