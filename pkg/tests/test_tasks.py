import math

import numpy as np
import pytest

from vsmeta.tasks import (
    DataArrivalSchedule,
    IncrementalDataset,
    TaskDistribution,
    TaskSpec,
    arrival_step,
    draw_points,
    read_stream,
    sample_batch,
    sample_stream,
    sample_task,
    write_stream,
)


def test_sinusoid_targets_follow_the_task():
    task = TaskSpec("sinusoid", {"amplitude": 2.0, "phase": 0.5}, 7)
    b = sample_batch(task, 50)
    assert b.inputs.shape == (50, 1) and b.targets.shape == (50, 1)
    assert np.all(np.abs(b.inputs) <= 5.0)
    assert np.allclose(b.targets, 2.0 * np.sin(b.inputs + 0.5))


def test_sampled_parameters_lie_in_ranges():
    rng = np.random.default_rng(0)
    for _ in range(200):
        t = sample_task(TaskDistribution(), rng)
        assert 0.1 <= t.params["amplitude"] <= 5.0
        assert 0.0 <= t.params["phase"] <= math.pi
    cls = sample_task(TaskDistribution(family="transformed-classification"), rng)
    assert cls.params["rotation"] in (0, 90, 180, 270)
    assert cls.params["scale"] in (0.5, 1.0)


def test_invalid_distributions_are_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_task(TaskDistribution(amplitude=(3.0, 1.0)), rng)
    with pytest.raises(ValueError):
        sample_task(TaskDistribution(amplitude=(0.0, 6.0)), rng)
    with pytest.raises(ValueError):
        sample_task(TaskDistribution(family="mnist"), rng)
    with pytest.raises(ValueError):
        sample_task(TaskDistribution(family="transformed-classification", rotations=(45,)), rng)


def test_classification_labels_and_transform():
    task = TaskSpec("transformed-classification", {"rotation": 90, "scale": 0.5, "offset": [1.0, -1.0]}, 3)
    b = sample_batch(task, 400)
    assert set(np.unique(b.targets)) <= {0, 1, 2, 3}
    # class 0 sits at (2, 0) before rotation by 90 degrees, scaling and shifting
    centre = b.inputs[b.targets == 0].mean(axis=0)
    assert np.allclose(centre, [1.0, 0.0], atol=0.15)


def test_train_and_test_streams_are_independent_and_reproducible():
    task = sample_task(TaskDistribution(), np.random.default_rng(1))
    a, b = sample_batch(task, 20, "train"), sample_batch(task, 20, "test")
    assert not np.intersect1d(a.inputs.ravel(), b.inputs.ravel()).size
    assert np.array_equal(a.inputs, sample_batch(task, 20, "train").inputs)


def test_arrivals_are_prefixes_of_one_stream():
    task = sample_task(TaskDistribution(), np.random.default_rng(2))
    ds = IncrementalDataset(task, n_test=10)
    assert ds.shot_count == 0
    schedule = DataArrivalSchedule(batch_size=3, interval=5)
    for _ in range(4):
        arrival_step(ds, schedule)
    assert ds.shot_count == 12
    assert np.array_equal(ds.arrived.inputs, sample_batch(task, 12).inputs)
    assert ds.test_split.n == 10


def test_schedule_validation():
    with pytest.raises(ValueError):
        DataArrivalSchedule(batch_size=0)
    assert DataArrivalSchedule(2, 5).target_size(3) == 6


def test_draw_points_uses_the_given_generator():
    task = TaskSpec("sinusoid", {"amplitude": 1.0, "phase": 0.0}, 0)
    a = draw_points(task, 5, np.random.default_rng(9))
    b = draw_points(task, 5, np.random.default_rng(9))
    assert np.array_equal(a.inputs, b.inputs)
    with pytest.raises(ValueError):
        draw_points(task, -1, np.random.default_rng(0))


def test_stream_round_trip(tmp_path):
    stream = sample_stream(TaskDistribution(), 5, seed=4)
    write_stream(tmp_path / "s.jsonl", stream)
    assert read_stream(tmp_path / "s.jsonl") == stream
    assert sample_stream(TaskDistribution(), 5, seed=4) == stream
