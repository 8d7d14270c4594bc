"""Seeded samplers shared by the discrete and mean-field initializers."""

from __future__ import annotations

import numpy as np


def uniform_ball(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    """Draw ``n`` points uniformly from the ball of the given radius in R^dim.

    Direction from an isotropic Gaussian, radius rescaled by u^(1/dim) so the
    volume element is uniform.  Returns an (n, dim) array.
    """
    x = rng.standard_normal((n, dim))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    u = rng.random((n, 1))
    return x / norms * (radius * u ** (1.0 / dim))


def ball_mean_sq_norm(dim: int, radius: float) -> float:
    """E||x||^2 for x uniform on the radius-``radius`` ball in R^dim."""
    return radius**2 * dim / (dim + 2)


def coupled_ball_draw(seed: int, slot: int, index: int, dim: int, radius: float) -> np.ndarray:
    """One ball point keyed by (seed, slot, index) so draws are shared across
    grids whose depth slots align onto a common master grid."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(slot, index)))
    return uniform_ball(rng, 1, dim, radius)[0]
