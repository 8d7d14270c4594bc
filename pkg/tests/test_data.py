import numpy as np
import pytest

from mftlab import data as icl
from mftlab.linalg import col2_norm
from mftlab.model import readout


def test_sequence_construction_example():
    task = icl.IclTask(d=1, N=2, a=np.array([1.0]))
    xs = np.array([[0.5, -0.5, 0.25]])
    H, y = task.sequence(xs)
    expected = np.array(
        [
            [0.5, -0.5, 0.25],
            [0.5, -0.5, 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    assert np.array_equal(H, expected)
    assert y == 0.25


def test_all_zero_features():
    task = icl.IclTask(d=2, N=3, a=np.array([0.6, 0.8]))
    H, y = task.sequence(np.zeros((2, 4)))
    assert y == 0.0
    only_positional = np.zeros((4, 4))
    only_positional[3, 3] = 1.0
    assert np.array_equal(H, only_positional)


def test_generated_samples_respect_bounds():
    task = icl.IclTask(d=2, N=4, a=np.array([0.5, -0.5]), b_x=1.5)
    ds = icl.generate(task, 1000, seed=11)
    for H, y in ds.samples:
        assert col2_norm(H) <= ds.bound + 1e-12
        assert abs(y) <= ds.bound + 1e-12


def test_read_row_is_masked_before_training():
    task = icl.IclTask(d=3, N=5, a=np.array([0.3, 0.3, 0.3]))
    ds = icl.generate(task, 20, seed=3)
    for H, _ in ds.samples:
        assert readout(H, ds.read_row) == 0.0


def test_generation_deterministic_in_seed():
    task = icl.IclTask(d=2, N=3, a=np.array([0.9, 0.1]))
    a = icl.generate(task, 10, seed=7)
    b = icl.generate(task, 10, seed=7)
    for (Ha, ya), (Hb, yb) in zip(a.samples, b.samples):
        assert np.array_equal(Ha, Hb) and ya == yb
    c = icl.generate(task, 10, seed=8)
    assert not np.array_equal(a.samples[0][0], c.samples[0][0])


def test_check_regularity_singleton():
    task = icl.IclTask(d=1, N=2, a=np.array([1.0]))
    ds = icl.generate(task, 1, seed=0)
    rep = icl.check_regularity(ds)
    assert rep.lipschitz_hat == 0.0
    assert rep.passed


def test_check_regularity_query_pair_ratio_equals_coefficient_norm():
    task = icl.IclTask(d=2, N=2, a=np.array([0.6, 0.8]))
    xs = np.array([[0.1, 0.2, 0.3], [0.0, -0.1, 0.2]])
    H1, y1 = task.sequence(xs)
    xs2 = xs.copy()
    xs2[:, -1] += 0.05 * task.a  # move the query along the coefficient direction
    H2, y2 = task.sequence(xs2)
    ds = icl.DataSet.from_samples([(H1, y1), (H2, y2)], read_row=task.read_row)
    rep = icl.check_regularity(ds)
    assert rep.lipschitz_hat == pytest.approx(np.linalg.norm(task.a), rel=1e-12)


def test_check_regularity_random_dataset_under_metadata_bound():
    task = icl.IclTask(d=3, N=6, a=np.array([0.5, 0.5, 0.5]), b_x=2.0)
    ds = icl.generate(task, 200, seed=5)
    rep = icl.check_regularity(ds)
    assert rep.bound_hat <= ds.bound + 1e-12
    assert rep.passed


def test_label_fn_plugin():
    task = icl.IclTask(d=1, N=2, a=np.array([1.0]))
    ds = icl.generate(task, 5, seed=1, label_fn=lambda x: float(np.tanh(x[0])))
    for H, y in ds.samples:
        assert y == pytest.approx(np.tanh(H[0, -1]))


def test_json_roundtrip():
    task = icl.IclTask(d=2, N=3, a=np.array([0.7, 0.3]))
    ds = icl.generate(task, 4, seed=9)
    back = icl.DataSet.from_json(ds.to_json())
    assert back.D == ds.D and back.N == ds.N and back.read_row == ds.read_row
    assert back.bound == ds.bound
    for (Ha, ya), (Hb, yb) in zip(ds.samples, back.samples):
        assert np.array_equal(Ha, Hb) and ya == yb


def test_task_validation():
    with pytest.raises(ValueError):
        icl.IclTask(d=2, N=2, a=np.array([1.0, 1.0]))  # |a| > 1
    with pytest.raises(ValueError):
        icl.IclTask(d=2, N=2, a=np.array([1.0]))  # wrong shape
    with pytest.raises(ValueError):
        icl.generate(icl.IclTask(d=1, N=2, a=np.array([1.0])), 0, seed=0)
