import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def central_fd(f, x, i, eps=1e-5):
    """Central finite difference of scalar f at coordinate i of vector x."""
    xp = x.copy()
    xm = x.copy()
    xp[i] += eps
    xm[i] -= eps
    return (f(xp) - f(xm)) / (2.0 * eps)


def fd_matrix_entry(f, Z, r, c, eps=1e-5):
    """Central FD of matrix-valued f w.r.t. entry (r, c) of Z."""
    Zp = Z.copy()
    Zm = Z.copy()
    Zp[r, c] += eps
    Zm[r, c] -= eps
    return (f(Zp) - f(Zm)) / (2.0 * eps)


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
