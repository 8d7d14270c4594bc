import itertools

import numpy as np
import pytest

from mftlab import transport


def brute_force_w2(a, b):
    n = a.shape[0]
    best = np.inf
    for perm in itertools.permutations(range(n)):
        cost = np.mean([np.sum((a[i] - b[perm[i]]) ** 2) for i in range(n)])
        best = min(best, cost)
    return np.sqrt(best)


def brute_force_w1(a, b):
    n = a.shape[0]
    best = np.inf
    for perm in itertools.permutations(range(n)):
        cost = np.mean([np.linalg.norm(a[i] - b[perm[i]]) for i in range(n)])
        best = min(best, cost)
    return best


def test_identical_clouds_have_zero_distance(rng):
    a = rng.standard_normal((5, 3))
    shuffled = a[rng.permutation(5)]
    assert transport.w2_exact(a, shuffled) == 0.0
    assert transport.w1_exact(a, shuffled) == 0.0


def test_singletons_at_distance_d():
    a = np.array([[0.0, 0.0]])
    b = np.array([[3.0, 4.0]])
    assert transport.w2_exact(a, b) == pytest.approx(5.0, rel=1e-15)
    assert transport.w1_exact(a, b) == pytest.approx(5.0, rel=1e-15)


def test_matches_factorial_enumeration(rng):
    for trial in range(60):
        n = int(rng.integers(1, 7))
        k = int(rng.integers(1, 4))
        a = rng.standard_normal((n, k))
        b = rng.standard_normal((n, k))
        assert abs(transport.w2_exact(a, b) - brute_force_w2(a, b)) <= 1e-12
        assert abs(transport.w1_exact(a, b) - brute_force_w1(a, b)) <= 1e-12


def test_metric_axioms_on_random_triples(rng):
    for _ in range(40):
        n, k = 5, 3
        a = rng.standard_normal((n, k))
        b = rng.standard_normal((n, k))
        c = rng.standard_normal((n, k))
        for dist in (transport.w2_exact, transport.w1_exact):
            assert dist(a, b) == dist(b, a)
            assert dist(a, c) <= dist(a, b) + dist(b, c) + 1e-10
            assert dist(a, b) >= 0.0


def test_w1_below_w2(rng):
    for _ in range(30):
        a = rng.standard_normal((6, 2))
        b = rng.standard_normal((6, 2))
        assert transport.w1_exact(a, b) <= transport.w2_exact(a, b) + 1e-12


def test_translation_invariance(rng):
    a = rng.standard_normal((7, 3))
    b = rng.standard_normal((7, 3))
    v = rng.standard_normal(3)
    assert abs(transport.w2_exact(a + v, b + v) - transport.w2_exact(a, b)) <= 1e-12
    assert abs(transport.w1_exact(a + v, b + v) - transport.w1_exact(a, b)) <= 1e-12


def test_shape_validation():
    with pytest.raises(ValueError):
        transport.w2_exact(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        transport.w1_exact(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        transport.w2_exact(np.array([[np.nan, 0.0]]), np.zeros((1, 2)))
