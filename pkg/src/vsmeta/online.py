"""Online incremental meta-learning with proficiency-gated task advancement.

Each task in the stream starts with no data.  The agent is evaluated
zero-shot, then datapoints arrive in small batches; between arrivals the
meta-learner takes gradient steps over a task minibatch drawn from the buffer
of everything seen so far.  A task is left behind once its test loss reaches
the threshold (or a step cap), and every evaluation loss is added to the
cumulative regret.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .learners import (
    FixedRate,
    MetaLearner,
    MetaOptimizerConfig,
    draw_episode,
    make_policy,
    meta_gradients,
)
from .models import Batch, MLPSpec, accuracy, empirical_risk, init_params
from .tasks import DataArrivalSchedule, IncrementalDataset, TaskSpec

METHODS = {
    "toe": None,
    "ftml": "fixed",
    "ftml-vl": "per-shot",
    "meta-sgd": "per-parameter",
    "ftml-vs": "scaled",
}
DIRECTIONS = ("loss", "accuracy")
LEDGER_HEADER = "# vsmeta regret ledger v1"
COMPARATOR_NOTE = "not computed"


class LedgerFormatError(ValueError):
    """A ledger export could not be parsed or is internally inconsistent."""


# --- configuration --------------------------------------------------------


@dataclass
class OnlineConfig:
    """Settings of one online run.

    ``threshold`` is a loss ceiling when ``direction == "loss"`` and an
    accuracy floor when ``direction == "accuracy"``.  A step is one call to
    the meta-update subroutine, which performs ``meta.meta_steps_per_arrival``
    optimizer updates.  ``schedule.interval`` steps separate two arrivals and
    the agent is evaluated every ``eval_every`` arrivals.
    """

    method: str = "ftml-vs"
    threshold: float = 0.4
    direction: str = "loss"
    max_steps_per_task: int = 200
    schedule: DataArrivalSchedule = field(default_factory=DataArrivalSchedule)
    meta: MetaOptimizerConfig = field(default_factory=MetaOptimizerConfig)
    eval_every: int = 1
    n_test: int = 100
    toe_batch: int = 10

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {sorted(METHODS)}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be 'loss' or 'accuracy', got {self.direction!r}")
        if self.max_steps_per_task < 1:
            raise ValueError("max_steps_per_task must be >= 1")
        if self.eval_every < 1 or self.n_test < 1 or self.toe_batch < 1:
            raise ValueError("eval_every, n_test and toe_batch must be >= 1")

    @property
    def policy_kind(self) -> str | None:
        return METHODS[self.method]

    def meets_threshold(self, score: float) -> bool:
        """Inclusive comparison against the threshold (score is loss or accuracy)."""
        if self.direction == "loss":
            return score <= self.threshold
        return score >= self.threshold

    def eval_shots(self, available: int) -> int:
        return min(available, self.meta.max_shots)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["meta"]["adam_betas"] = list(d["meta"]["adam_betas"])
        return d


def config_hash(payload: dict) -> str:
    """Short stable digest of a JSON-serializable configuration."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def stream_hash(stream: Sequence[TaskSpec]) -> str:
    return hashlib.sha256("\n".join(t.to_json() for t in stream).encode()).hexdigest()[:16]


# --- buffer ---------------------------------------------------------------


def _frozen(batch: Batch) -> Batch:
    inputs, targets = batch.inputs.copy(), batch.targets.copy()
    inputs.flags.writeable = False
    targets.flags.writeable = False
    return Batch(inputs, targets)


class TaskBuffer:
    """Tasks seen so far: frozen data for finished tasks plus the live one."""

    def __init__(self):
        self.entries: list[tuple[TaskSpec, Batch]] = []
        self.current: IncrementalDataset | None = None

    def __len__(self) -> int:
        return len(self.entries) + (self.current is not None)

    def begin(self, dataset: IncrementalDataset) -> None:
        if self.current is not None:
            raise RuntimeError("finish the current task before starting another")
        self.current = dataset

    def freeze_current(self) -> None:
        if self.current is None:
            raise RuntimeError("no live task to freeze")
        self.entries.append((self.current.task, _frozen(self.current.arrived)))
        self.current = None

    def data(self, index: int) -> Batch:
        if index < len(self.entries):
            return self.entries[index][1]
        if index == len(self.entries) and self.current is not None:
            return self.current.arrived
        raise IndexError(index)

    def all_data(self) -> list[Batch]:
        return [self.data(i) for i in range(len(self))]


# --- ledger ---------------------------------------------------------------


@dataclass(frozen=True)
class Evaluation:
    task_index: int
    step: int
    shots: int
    loss: float
    cumulative: float


@dataclass(frozen=True)
class TaskRecord:
    task_index: int
    shots_to_threshold: int
    reached: bool
    n_evaluations: int
    steps: int


@dataclass
class RegretLedger:
    """Every evaluation loss of a run and the running regret sum."""

    meta: dict = field(default_factory=dict)
    evaluations: list[Evaluation] = field(default_factory=list)
    tasks: list[TaskRecord] = field(default_factory=list)
    cumulative: float = 0.0

    def record(self, task_index: int, step: int, shots: int, loss: float) -> Evaluation:
        if not np.isfinite(loss):
            raise ad.NonFiniteError("evaluation", f"task {task_index}, shots {shots}")
        self.cumulative = self.cumulative + float(loss)
        ev = Evaluation(task_index, step, shots, float(loss), self.cumulative)
        self.evaluations.append(ev)
        return ev

    def close_task(self, task_index: int, shots: int, reached: bool, steps: int) -> TaskRecord:
        if any(r.task_index == task_index for r in self.tasks):
            raise ValueError(f"task {task_index} already closed")
        n = sum(1 for e in self.evaluations if e.task_index == task_index)
        rec = TaskRecord(task_index, int(shots), bool(reached), n, int(steps))
        self.tasks.append(rec)
        return rec

    def replay(self) -> float:
        total = 0.0
        for e in self.evaluations:
            total = total + e.loss
        return total

    def losses_for(self, task_index: int) -> list[float]:
        return [e.loss for e in self.evaluations if e.task_index == task_index]

    @property
    def shots_to_threshold(self) -> list[int]:
        return [r.shots_to_threshold for r in self.tasks]

    # Serialization uses repr() for floats, which round-trips exactly.
    def export(self) -> str:
        if self.replay() != self.cumulative:
            raise LedgerFormatError("cumulative regret does not match the sum of evaluations")
        out = io.StringIO()
        out.write(LEDGER_HEADER + "\n")
        for key in sorted(self.meta):
            out.write(f"{key} = {self.meta[key]}\n")
        out.write(f"comparator = {COMPARATOR_NOTE}\n")
        out.write("[evaluations]\ntask_index,step,shots,loss,cumulative\n")
        for e in self.evaluations:
            out.write(f"{e.task_index},{e.step},{e.shots},{e.loss!r},{e.cumulative!r}\n")
        out.write("[tasks]\ntask_index,shots_to_threshold,reached,n_evaluations,steps\n")
        for r in self.tasks:
            out.write(f"{r.task_index},{r.shots_to_threshold},{int(r.reached)},{r.n_evaluations},{r.steps}\n")
        out.write("[summary]\n")
        out.write(f"final_cumulative = {self.cumulative!r}\n")
        out.write(f"total_shots = {sum(self.shots_to_threshold)}\n")
        out.write(f"n_tasks = {len(self.tasks)}\n")
        out.write(f"n_evaluations = {len(self.evaluations)}\n")
        return out.getvalue()

    @classmethod
    def parse(cls, text: str) -> "RegretLedger":
        lines = text.splitlines()
        if not lines or lines[0] != LEDGER_HEADER:
            raise LedgerFormatError("missing ledger header")
        ledger = cls()
        section, summary, expect_columns = None, {}, False
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1]
                expect_columns = section in ("evaluations", "tasks")
                continue
            if expect_columns:
                expect_columns = False
                continue
            try:
                if section is None:
                    key, value = (s.strip() for s in line.split("=", 1))
                    if key != "comparator":
                        ledger.meta[key] = value
                elif section == "evaluations":
                    t, step, shots, loss, cum = line.split(",")
                    ledger.evaluations.append(Evaluation(int(t), int(step), int(shots), float(loss), float(cum)))
                elif section == "tasks":
                    t, s, reached, n, steps = line.split(",")
                    ledger.tasks.append(TaskRecord(int(t), int(s), bool(int(reached)), int(n), int(steps)))
                elif section == "summary":
                    key, value = (s.strip() for s in line.split("=", 1))
                    summary[key] = value
                else:
                    raise LedgerFormatError(f"unknown section [{section}]")
            except ValueError as exc:
                raise LedgerFormatError(f"line {lineno}: {exc}") from exc
        if "final_cumulative" not in summary:
            raise LedgerFormatError("missing [summary] final_cumulative")
        ledger.cumulative = float(summary["final_cumulative"])
        if ledger.replay() != ledger.cumulative:
            raise LedgerFormatError("final_cumulative does not match the evaluation losses")
        if ledger.evaluations and ledger.evaluations[-1].cumulative != ledger.cumulative:
            raise LedgerFormatError("running cumulative column is inconsistent")
        return ledger


# --- learner construction -------------------------------------------------


def make_learner(config: OnlineConfig, spec: MLPSpec, rng: np.random.Generator) -> MetaLearner:
    params = init_params(spec, rng)
    kind = config.policy_kind
    # TOE never adapts: a zero rate makes every inner update the identity.
    policy = FixedRate(0.0) if kind is None else make_policy(kind, params, config.meta)
    return MetaLearner(spec, params, policy, config.meta)


# --- meta-update and baselines --------------------------------------------


def _zero_grads(learner: MetaLearner) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in learner.named_arrays().items()}


def sample_task_indices(n_tasks: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform task indices in ``0..n_tasks-1``, with replacement."""
    return rng.integers(0, n_tasks, size=size)


def vs_meta_update(
    learner: MetaLearner, buffer: TaskBuffer, rng: np.random.Generator, fixed_shots: int | None = None
) -> dict:
    """One outer optimizer step on a task minibatch drawn from the buffer.

    Task indices are uniform over the buffer (with replacement); each task
    contributes an episode with ``K ~ Unif{0..min(M, |D|)}``.  Tasks with no
    data add no term; if no task has data the step is skipped and the
    reported gradients are exactly zero.  ``fixed_shots`` pins K (capped at
    each task's size) instead of sampling it.
    """
    cfg = learner.config
    n_tasks = len(buffer)
    if n_tasks == 0:
        raise ValueError("buffer is empty")
    indices = sample_task_indices(n_tasks, cfg.meta_batch, rng)
    episodes = [
        draw_episode(buffer.data(int(j)), cfg.max_shots, rng, cfg.val_size, fixed_shots, int(j)) for j in indices
    ]
    info = {"task_indices": indices, "shots": [ep.shots for ep in episodes], "skipped": False}
    if all(ep.val.n == 0 for ep in episodes):
        info.update(objective=0.0, grads=_zero_grads(learner), skipped=True)
        return info
    j, leaves = learner.objective(episodes)
    grads = meta_gradients(j, leaves)
    learner.apply(grads)
    info.update(objective=j.item(), grads=grads)
    return info


def toe_update(learner: MetaLearner, buffer: TaskBuffer, rng: np.random.Generator, batch_size: int = 10) -> dict:
    """One supervised Adam step on a minibatch from the union of buffered data."""
    union = [b for b in buffer.all_data() if b.n]
    if not union:
        return {"skipped": True, "grads": _zero_grads(learner), "indices": np.zeros(0, dtype=np.int64)}
    pool = Batch.concat(union)
    owners = np.concatenate([np.full(b.n, i) for i, b in enumerate(union)])
    idx = rng.choice(pool.n, size=min(batch_size, pool.n), replace=False)
    leaves = {k: ad.Tensor(v.copy(), requires_grad=True) for k, v in learner.named_arrays().items()}
    weights = [leaves[f"theta.{i}"] for i in range(len(learner.params.arrays()))]
    loss = empirical_risk(weights, pool.take(idx), learner.spec)
    grads = meta_gradients(loss, leaves)
    learner.apply(grads)
    return {"skipped": False, "grads": grads, "indices": idx, "owners": owners[idx], "loss": loss.item()}


def evaluate_and_maybe_advance(
    learner: MetaLearner,
    dataset: IncrementalDataset,
    config: OnlineConfig,
    rng: np.random.Generator,
) -> tuple[float, bool]:
    """Adapt on ``min(s, M)`` received points, score on the test split.

    Returns ``(loss, advanced)``.  For accuracy thresholds the loss is
    ``1 - accuracy``.  TOE scores ``theta`` directly.
    """
    s = dataset.shot_count
    k = config.eval_shots(s)
    if config.policy_kind is None or k == 0:
        adapted = learner.params
    else:
        subset = dataset.arrived.take(rng.choice(s, size=k, replace=False))
        adapted = learner.adapt(subset, k)
    test = dataset.test_split
    if config.direction == "loss":
        with ad.no_grad():
            loss = empirical_risk(adapted, test, learner.spec).item()
        score = loss
    else:
        score = accuracy(adapted, test, learner.spec)
        loss = 1.0 - score
    if not np.isfinite(loss):
        raise ad.NonFiniteError("evaluation", f"shots {s}")
    return loss, config.meets_threshold(score)


# --- the online process ---------------------------------------------------


@dataclass
class OnlineResult:
    ledger: RegretLedger
    learner: MetaLearner
    buffer: TaskBuffer


def run_online(
    config: OnlineConfig,
    stream: Sequence[TaskSpec],
    seed: int,
    spec: MLPSpec | None = None,
    meta: dict | None = None,
    on_update: Callable[[dict], None] | None = None,
) -> OnlineResult:
    """Run the full online protocol over ``stream``.

    Per task: evaluate zero-shot; until the threshold is met or the step cap
    is reached, receive a batch of data, take ``schedule.interval`` steps,
    and re-evaluate.  Parameters carry over between tasks.
    """
    if not stream:
        raise ValueError("task stream is empty")
    if spec is None:
        first = stream[0]
        spec = (
            MLPSpec.regression()
            if first.family == "sinusoid"
            else MLPSpec.classification(first.d_in, first.n_outputs)
        )
    init_rng = np.random.default_rng([seed, 0])
    update_rng = np.random.default_rng([seed, 1])
    eval_rng = np.random.default_rng([seed, 2])
    learner = make_learner(config, spec, init_rng)
    ledger = RegretLedger(meta=dict(meta or {}))
    buffer = TaskBuffer()

    def update():
        if config.policy_kind is None:
            info = toe_update(learner, buffer, update_rng, config.toe_batch)
        else:
            info = vs_meta_update(learner, buffer, update_rng)
        if on_update is not None:
            on_update(info)

    for t, task in enumerate(stream):
        dataset = IncrementalDataset(task, config.n_test)
        buffer.begin(dataset)
        step = arrivals = 0
        try:
            loss, advanced = evaluate_and_maybe_advance(learner, dataset, config, eval_rng)
            ledger.record(t, step, dataset.shot_count, loss)
            while not advanced and step < config.max_steps_per_task:
                dataset.receive(config.schedule.batch_size)
                arrivals += 1
                for _ in range(config.schedule.interval):
                    for _ in range(config.meta.meta_steps_per_arrival):
                        update()
                    step += 1
                    if step >= config.max_steps_per_task:
                        break
                if arrivals % config.eval_every == 0 or step >= config.max_steps_per_task:
                    loss, advanced = evaluate_and_maybe_advance(learner, dataset, config, eval_rng)
                    ledger.record(t, step, dataset.shot_count, loss)
        except ad.NonFiniteError as exc:
            raise ad.NonFiniteError(exc.op, f"task {t}, shots {dataset.shot_count}: {exc.detail}") from exc
        ledger.close_task(t, dataset.shot_count, advanced, step)
        buffer.freeze_current()
    return OnlineResult(ledger, learner, buffer)
