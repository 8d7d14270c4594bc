"""Minimal dense linear algebra: norms, vectorization, deterministic kernels.

Matrices are 2-d ``numpy.ndarray`` objects with float64 entries, stored
row-major (numpy's C order).  Vectorization is column-stacking: entry
``(r, c)`` of a ``rows x cols`` matrix lands at flat index ``c * rows + r``,
so ``vectorize(A)[c * rows + r] == A[r, c]``.  All reductions run in numpy's
fixed summation order, so identical inputs give bitwise identical results.
"""

from __future__ import annotations

import numpy as np


def as_matrix(a) -> np.ndarray:
    """Coerce to a float64 2-d array, rejecting anything else."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got ndim={a.ndim}")
    return a


def require_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    """Raise if ``a`` contains NaN or Inf entries."""
    if not np.isfinite(a).all():
        raise FloatingPointError(f"non-finite entries in {what}")
    return a


def frobenius_norm(a) -> float:
    """Square root of the sum of squared entries."""
    return float(np.sqrt(np.sum(np.square(as_matrix(a)))))


def col2_norm(a) -> float:
    """Maximum Euclidean norm over the columns of ``a``."""
    a = as_matrix(a)
    return float(np.max(np.sqrt(np.sum(np.square(a), axis=0))))


def vectorize(a) -> np.ndarray:
    """Column-stacking vectorization of a matrix."""
    return as_matrix(a).flatten(order="F")


def devectorize(v, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`vectorize` for the given shape."""
    v = np.asarray(v, dtype=np.float64)
    if v.size != rows * cols:
        raise ValueError(f"vector of size {v.size} cannot fill {rows}x{cols}")
    return v.reshape((rows, cols), order="F")


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def matvec(a, x) -> np.ndarray:
    a = as_matrix(a)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or a.shape[1] != x.shape[0]:
        raise ValueError(f"matvec shape mismatch: {a.shape} x {x.shape}")
    return a @ x


def transpose(a) -> np.ndarray:
    return as_matrix(a).T.copy()


def axpy(alpha: float, x, y) -> np.ndarray:
    """alpha * x + y for same-shape arrays."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    return float(alpha) * x + y
