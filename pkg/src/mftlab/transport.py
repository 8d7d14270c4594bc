"""Exact optimal-transport distances between equal-size uniform point clouds.

Clouds are (n, k) arrays of n points in R^k with uniform weights 1/n; the
distances reduce to a minimum-cost perfect matching, solved exactly by the
Jonker-Volgenant shortest-augmenting-path assignment in scipy.  The returned
value is tie-invariant even when several matchings are optimal.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("point clouds must be 2-d (n points x k coords)")
    if a.shape != b.shape:
        raise ValueError(f"clouds must have equal shapes, got {a.shape} vs {b.shape}")
    if a.shape[0] < 1:
        raise ValueError("clouds must contain at least one point")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("clouds must be finite")
    return a, b


def _matched_mean(cost: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(cost)
    # canonical summation order keeps the value bitwise symmetric in (a, b)
    return float(np.sort(cost[rows, cols]).mean())


def w2_exact(a, b) -> float:
    """Wasserstein-2 distance: sqrt of the best mean squared matching cost."""
    a, b = _check_pair(a, b)
    return float(np.sqrt(_matched_mean(cdist(a, b, metric="sqeuclidean"))))


def w1_exact(a, b) -> float:
    """Wasserstein-1 distance: best mean matching cost with unsquared
    Euclidean ground metric."""
    a, b = _check_pair(a, b)
    return _matched_mean(cdist(a, b, metric="euclidean"))
