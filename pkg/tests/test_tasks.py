import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtnet.tasks import (
    TaskDistribution,
    dump_task,
    load_task,
    sample_polynomial_task,
    sample_sinusoid_task,
    target_function,
    task_seed,
)


def test_sinusoid_ranges():
    rng = np.random.default_rng(0)
    tasks = [sample_sinusoid_task(10, 10, rng) for _ in range(500)]
    amps = np.array([t.descriptor["A"] for t in tasks])
    freqs = np.array([t.descriptor["w"] for t in tasks])
    phases = np.array([t.descriptor["b"] for t in tasks])
    assert 0.1 <= amps.min() and amps.max() <= 5.0
    assert 0.8 <= freqs.min() and freqs.max() <= 1.2
    assert 0.0 <= phases.min() and phases.max() <= np.pi
    xs = np.concatenate([t.x_train for t in tasks])
    assert -5.0 <= xs.min() and xs.max() <= 5.0


def test_targets_are_noiseless():
    t = sample_sinusoid_task(7, 3, np.random.default_rng(1))
    d = t.descriptor
    np.testing.assert_allclose(t.y_train, d["A"] * np.sin(d["w"] * t.x_train + d["b"]))
    assert len(t.train) == 7 and len(t.test) == 3


def test_polynomial_coefficients_lowest_first():
    desc = {"kind": "polynomial", "order": 2, "coefs": [1.0, 0.0, -2.0]}
    np.testing.assert_allclose(target_function(desc, [0.0, 1.0, 2.0]), [1.0, -1.0, -7.0])


def test_polynomial_order_and_range():
    t = sample_polynomial_task(2, 5, 5, np.random.default_rng(3))
    assert len(t.descriptor["coefs"]) == 3
    assert all(-1 <= c <= 1 for c in t.descriptor["coefs"])
    with pytest.raises(ValueError):
        sample_polynomial_task(-1, 5, 5, np.random.default_rng(0))


def test_distribution_validation_and_features():
    with pytest.raises(ValueError):
        TaskDistribution(kind="gaussian")
    with pytest.raises(ValueError):
        TaskDistribution(k_train=0)
    x = np.array([1.0, 2.0])
    assert TaskDistribution().features(x).shape == (1, 2)
    aug = TaskDistribution(augment_bias=True)
    np.testing.assert_array_equal(aug.features(x), [[1.0, 2.0], [1.0, 1.0]])
    assert aug.input_dim == 2


def test_task_seed_streams_are_reproducible_and_distinct():
    dist = TaskDistribution()
    a = dist.sample(task_seed(5, 3))
    b = dist.sample(task_seed(5, 3))
    c = dist.sample(task_seed(5, 4))
    assert a.descriptor == b.descriptor
    assert a.descriptor != c.descriptor


def test_describe():
    assert TaskDistribution().describe() == "sinusoid"
    assert TaskDistribution("polynomial", 2).describe() == "polynomial2"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["sinusoid", "polynomial"]), st.integers(0, 3), st.integers(1, 12))
def test_dump_load_round_trip(seed, kind, order, k):
    dist = TaskDistribution(kind, order, k_train=k, k_test=4)
    task = dist.sample(np.random.default_rng(seed))
    again = load_task(dump_task(task))
    assert again.descriptor == task.descriptor
    np.testing.assert_array_equal(again.x_train, task.x_train)
    np.testing.assert_array_equal(again.y_test, task.y_test)
    # the dumped descriptor regenerates the targets
    np.testing.assert_allclose(again(again.x_train), again.y_train, rtol=0, atol=1e-12)
