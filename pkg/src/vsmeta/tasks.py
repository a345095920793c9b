"""Task families, per-task data streams and incremental data arrival.

Every task owns independent random streams keyed by ``(task seed, split,
component)``.  The train and test splits therefore never share draws, and
the train stream yields the same points no matter how arrivals are batched.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .models import Batch

FAMILIES = ("sinusoid", "transformed-classification")
SPLITS = {"train": 0, "test": 1}

ROTATIONS = (0, 90, 180, 270)
SCALES = (0.5, 1.0)
# Base class clusters for the classification family (before the task transform).
CLASS_CENTERS = np.array([[2.0, 0.0], [0.0, 2.0], [-2.0, 0.0], [0.0, -2.0]])
CLASS_STD = 0.5


@dataclass(frozen=True)
class TaskSpec:
    family: str
    params: dict
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {"family": self.family, "params": self.params, "seed": self.seed},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "TaskSpec":
        d = json.loads(line)
        return cls(d["family"], d["params"], int(d["seed"]))

    @property
    def d_in(self) -> int:
        return 1 if self.family == "sinusoid" else 2

    @property
    def n_outputs(self) -> int:
        return 1 if self.family == "sinusoid" else len(CLASS_CENTERS)


@dataclass(frozen=True)
class TaskDistribution:
    """Uniform ranges for a task family.

    ``sinusoid``: amplitude and phase ranges.  ``transformed-classification``:
    rotation and scale are drawn from finite grids, offset uniformly from
    ``[-offset_range, offset_range]^2``.
    """

    family: str = "sinusoid"
    amplitude: tuple[float, float] = (0.1, 5.0)
    phase: tuple[float, float] = (0.0, math.pi)
    rotations: tuple[int, ...] = ROTATIONS
    scales: tuple[float, ...] = SCALES
    offset_range: float = 1.0


def _check_range(name: str, lo: float, hi: float, bounds: tuple[float, float]) -> None:
    if lo > hi:
        raise ValueError(f"empty range for {name}: [{lo}, {hi}]")
    if lo < bounds[0] or hi > bounds[1]:
        raise ValueError(f"{name} range [{lo}, {hi}] outside [{bounds[0]}, {bounds[1]}]")


def sample_task(dist: TaskDistribution, rng: np.random.Generator) -> TaskSpec:
    if dist.family == "sinusoid":
        _check_range("amplitude", *dist.amplitude, (0.1, 5.0))
        _check_range("phase", *dist.phase, (0.0, math.pi))
        params = {
            "amplitude": float(rng.uniform(*dist.amplitude)),
            "phase": float(rng.uniform(*dist.phase)),
        }
    elif dist.family == "transformed-classification":
        if not dist.rotations or not dist.scales:
            raise ValueError("empty rotation or scale grid")
        if set(dist.rotations) - set(ROTATIONS) or set(dist.scales) - set(SCALES):
            raise ValueError("rotation/scale outside the supported grid")
        if dist.offset_range < 0:
            raise ValueError("offset_range must be nonnegative")
        params = {
            "rotation": int(dist.rotations[rng.integers(len(dist.rotations))]),
            "scale": float(dist.scales[rng.integers(len(dist.scales))]),
            "offset": [float(v) for v in rng.uniform(-dist.offset_range, dist.offset_range, 2)],
        }
    else:
        raise ValueError(f"unknown task family {dist.family!r}")
    return TaskSpec(dist.family, params, int(rng.integers(2**31 - 1)))


def sample_stream(dist: TaskDistribution, n_tasks: int, seed: int) -> list[TaskSpec]:
    rng = np.random.default_rng(seed)
    return [sample_task(dist, rng) for _ in range(n_tasks)]


def _component_rng(task: TaskSpec, split: str, component: int) -> np.random.Generator:
    return np.random.default_rng([task.seed, SPLITS[split], component])


class _TaskSampler:
    """Sequential draws from one split of one task.

    Each random quantity has its own stream, so ``draw(a)`` followed by
    ``draw(b)`` equals ``draw(a + b)``.
    """

    def __init__(self, task: TaskSpec, split: str):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        if task.family not in FAMILIES:
            raise ValueError(f"unknown task family {task.family!r}")
        self.task = task
        self._x = _component_rng(task, split, 0)
        self._label = _component_rng(task, split, 1)

    def draw(self, n: int) -> Batch:
        return draw_points(self.task, n, self._x, self._label)


def draw_points(
    task: TaskSpec,
    n: int,
    rng: np.random.Generator,
    label_rng: np.random.Generator | None = None,
) -> Batch:
    """``n`` i.i.d. datapoints of ``task`` using the given generator(s)."""
    if n < 0:
        raise ValueError(f"n must be nonnegative, got {n}")
    p = task.params
    if task.family == "sinusoid":
        x = rng.uniform(-5.0, 5.0, size=(n, 1))
        return Batch(x, p["amplitude"] * np.sin(x + p["phase"]))
    if task.family != "transformed-classification":
        raise ValueError(f"unknown task family {task.family!r}")
    labels = (label_rng or rng).integers(len(CLASS_CENTERS), size=n)
    base = CLASS_CENTERS[labels] + CLASS_STD * rng.standard_normal((n, 2))
    theta = math.radians(p["rotation"])
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    x = p["scale"] * base @ rot.T + np.asarray(p["offset"])
    return Batch(x, labels)


def sample_batch(task: TaskSpec, n: int, split: str = "train") -> Batch:
    """First ``n`` points of the task's ``split`` stream."""
    return _TaskSampler(task, split).draw(n)


@dataclass(frozen=True)
class DataArrivalSchedule:
    """``batch_size`` new points arrive every ``interval`` meta-update steps."""

    batch_size: int = 2
    interval: int = 5

    def __post_init__(self):
        if self.batch_size < 1 or self.interval < 1:
            raise ValueError("batch_size and interval must be >= 1")

    def target_size(self, arrivals: int) -> int:
        return self.batch_size * arrivals


@dataclass
class IncrementalDataset:
    """Data received so far for one task plus its fixed held-out test split."""

    task: TaskSpec
    n_test: int = 100
    arrived: Batch = field(init=False)
    test_split: Batch = field(init=False)

    def __post_init__(self):
        self._train = _TaskSampler(self.task, "train")
        self.arrived = self._train.draw(0)
        self.test_split = sample_batch(self.task, self.n_test, "test")

    @property
    def shot_count(self) -> int:
        return self.arrived.n

    def receive(self, n: int) -> None:
        if n:
            self.arrived = Batch.concat([self.arrived, self._train.draw(n)])


def arrival_step(dataset: IncrementalDataset, schedule: DataArrivalSchedule) -> IncrementalDataset:
    dataset.receive(schedule.batch_size)
    return dataset


def write_stream(path, tasks: Iterable[TaskSpec]) -> None:
    Path(path).write_text("".join(t.to_json() + "\n" for t in tasks))


def read_stream(path) -> list[TaskSpec]:
    return [TaskSpec.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]
