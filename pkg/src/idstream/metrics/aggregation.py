"""Planner-weighted segment and transition aggregation."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

PLANNER_MIN, PLANNER_MAX = 1, 100


def percentile(values, q: float) -> float:
    """``q``-th percentile with linear interpolation between closest ranks."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("percentile of an empty sample")
    return float(np.percentile(arr, q, method="linear"))


def planner_valid(u, T: int) -> bool:
    if not isinstance(u, (list, tuple)) or len(u) != T:
        return False
    for x in u:
        if isinstance(x, bool) or not isinstance(x, (int, np.integer)):
            return False
        if not PLANNER_MIN <= x <= PLANNER_MAX:
            return False
    return True


def planner_weights(u: Optional[Sequence[int]], T: int) -> np.ndarray:
    """``u_i / sum(u)``; anything other than T integers in [1, 100] gives uniform weights."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not planner_valid(u, T):
        return np.full(T, 1.0 / T)
    arr = np.asarray(u, dtype=np.float64)
    return arr / arr.sum()


def agg_seg(x: Sequence[float], w: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape != w.shape:
        raise ValueError(f"{x.size} segment values for {w.size} weights")
    return float(np.dot(w, x))


def agg_tr(x: dict[int, float] | Sequence[Optional[float]], w: Sequence[float]) -> float:
    """Transition aggregation over the valid set.

    ``x`` maps 0-based transition ``i`` (between segments i and i+1) to its
    score, or is a length T-1 list with ``None`` for transitions outside the
    valid set.
    """
    w = np.asarray(w, dtype=np.float64)
    if not isinstance(x, dict):
        if len(x) != w.size - 1:
            raise ValueError(f"{len(x)} transition values for {w.size} segments")
        x = {i: v for i, v in enumerate(x) if v is not None}
    if not x:
        raise ValueError("no valid transitions")
    num = den = 0.0
    for i, value in sorted(x.items()):
        if not 0 <= i < w.size - 1:
            raise ValueError(f"transition index {i} out of range")
        pair = w[i] + w[i + 1]
        num += pair * value
        den += pair
    return float(num / den)
