"""Inner updates, learning-rate policies and variable-shot meta-objectives.

The four online methods differ only in how the inner step size is produced
for a given shot count:

* ``FixedRate``        one constant, not learned (FTML / plain MAML)
* ``PerShotRate``      a learned table ``alpha_0 .. alpha_M`` (FTML-VL)
* ``PerParameterRate`` a learned rate per parameter entry (Meta-SGD)
* ``ScaledRate``       the learned rule ``(1 - 1/(1 + eta*s)) * beta`` (FTML-VS)
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import Batch, MLPSpec, ParamVector, empirical_risk

CHECKPOINT_FORMAT = "vsmeta-checkpoint"
CHECKPOINT_VERSION = 1


def softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def inverse_softplus(y: float) -> float:
    if y <= 0:
        raise ValueError("softplus is positive; cannot invert a nonpositive value")
    return float(y + np.log(-np.expm1(-y)))


def scaled_rate(beta, eta, shots):
    """``(1 - 1/(1 + eta*shots)) * beta``; works on floats and tensors alike."""
    return (1.0 - 1.0 / (1.0 + eta * shots)) * beta


@dataclass
class ScaledLearningRate:
    """Learnable ``(beta, eta)`` stored through a softplus so both stay positive."""

    beta_raw: float
    eta_raw: float

    @classmethod
    def from_values(cls, beta: float, eta: float) -> "ScaledLearningRate":
        return cls(inverse_softplus(beta), inverse_softplus(eta))

    @property
    def beta(self) -> float:
        return softplus(self.beta_raw)

    @property
    def eta(self) -> float:
        return softplus(self.eta_raw)


def scaled_lr(lr: ScaledLearningRate, shots: float) -> float:
    if shots < 0:
        raise ValueError("shot count must be nonnegative")
    return scaled_rate(lr.beta, lr.eta, shots)


# --- learning-rate policies ------------------------------------------------


class RatePolicy:
    kind = "base"

    def learnables(self) -> dict[str, np.ndarray]:
        return {}

    def set_learnables(self, values: dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            self._set(name, np.array(value, dtype=np.float64))

    def _set(self, name, value):
        raise KeyError(name)

    def rate(self, shots: int, live: dict[str, Tensor] | None = None):
        """Inner step size for ``shots`` datapoints.

        ``live`` maps learnable names to tape tensors; without it the current
        values are used as constants.
        """
        if live is None:
            live = {k: Tensor(v) for k, v in self.learnables().items()}
        return self._rate(shots, live)

    def _rate(self, shots, live):
        raise NotImplementedError


class FixedRate(RatePolicy):
    kind = "fixed"

    def __init__(self, alpha: float):
        self.alpha = float(alpha)

    def _rate(self, shots, live):
        return self.alpha


class PerShotRate(RatePolicy):
    kind = "per-shot"

    def __init__(self, table):
        self.table = np.array(table, dtype=np.float64)

    @classmethod
    def constant(cls, alpha: float, max_shots: int) -> "PerShotRate":
        return cls(np.full(max_shots + 1, float(alpha)))

    @property
    def max_shots(self) -> int:
        return len(self.table) - 1

    def learnables(self):
        return {"table": self.table}

    def _set(self, name, value):
        if name != "table" or value.shape != self.table.shape:
            raise KeyError(name)
        self.table = value

    def _rate(self, shots, live):
        if not 0 <= shots <= self.max_shots:
            raise ValueError(f"shot count {shots} outside the table 0..{self.max_shots}")
        onehot = np.zeros_like(self.table)
        onehot[shots] = 1.0
        return (live["table"] * onehot).sum()


class PerParameterRate(RatePolicy):
    kind = "per-parameter"

    def __init__(self, rates: Sequence[np.ndarray]):
        self.rates = [np.array(r, dtype=np.float64) for r in rates]

    @classmethod
    def like(cls, params: ParamVector, alpha: float) -> "PerParameterRate":
        return cls([np.full(a.shape, float(alpha)) for a in params.arrays()])

    def learnables(self):
        return {f"rate.{i}": r for i, r in enumerate(self.rates)}

    def _set(self, name, value):
        i = int(name.split(".")[1])
        if value.shape != self.rates[i].shape:
            raise KeyError(name)
        self.rates[i] = value

    def _rate(self, shots, live):
        return [live[f"rate.{i}"] for i in range(len(self.rates))]


class ScaledRate(RatePolicy):
    kind = "scaled"

    def __init__(self, lr: ScaledLearningRate):
        self.lr = lr

    def learnables(self):
        return {"beta_raw": np.array(self.lr.beta_raw), "eta_raw": np.array(self.lr.eta_raw)}

    def _set(self, name, value):
        if name == "beta_raw":
            self.lr.beta_raw = float(value)
        elif name == "eta_raw":
            self.lr.eta_raw = float(value)
        else:
            raise KeyError(name)

    def _rate(self, shots, live):
        beta = ad.softplus(live["beta_raw"])
        eta = ad.softplus(live["eta_raw"])
        return scaled_rate(beta, eta, float(shots))


POLICY_KINDS = ("fixed", "per-shot", "per-parameter", "scaled")


# --- configuration --------------------------------------------------------


@dataclass
class MetaOptimizerConfig:
    outer_rate: float = 1e-4
    inner_steps: int = 5
    meta_steps_per_arrival: int = 1
    grad_clip: float = 10.0
    inner_clip: float = 10.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_shots: int = 20
    first_order: bool = False
    meta_batch: int = 5
    val_size: int = 10
    inner_rate_init: float = 0.1
    eta_init: float = 1.0

    def __post_init__(self):
        if self.outer_rate <= 0:
            raise ValueError("outer_rate must be positive")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.max_shots < 1:
            raise ValueError("max_shots must be >= 1")
        if self.meta_steps_per_arrival < 1 or self.meta_batch < 1 or self.val_size < 1:
            raise ValueError("meta_steps_per_arrival, meta_batch and val_size must be >= 1")


def make_policy(kind: str, params: ParamVector, config: MetaOptimizerConfig) -> RatePolicy:
    alpha = config.inner_rate_init
    if kind == "fixed":
        return FixedRate(alpha)
    if kind == "per-shot":
        return PerShotRate.constant(alpha, config.max_shots)
    if kind == "per-parameter":
        return PerParameterRate.like(params, alpha)
    if kind == "scaled":
        return ScaledRate(ScaledLearningRate.from_values(alpha, config.eta_init))
    raise ValueError(f"unknown policy kind {kind!r}")


# --- inner update ---------------------------------------------------------


def _global_norm(arrays) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))


def inner_update(
    params,
    alpha,
    train: Batch,
    spec: MLPSpec,
    n_steps: int = 1,
    clip: float | None = 10.0,
    create_graph: bool = True,
    first_order: bool = False,
):
    """Take ``n_steps`` clipped gradient steps on the empirical risk of ``train``.

    ``params`` is a list of tape tensors (the result stays on the tape) or a
    :class:`ParamVector` (the result is a new ``ParamVector``).  ``alpha`` is
    a float, a scalar tensor, or one tensor per parameter.  An empty batch or a
    constant zero rate returns the parameters untouched.

    Clipping rescales the step to global norm ``clip``; the scale factor is a
    constant for the backward pass.
    """
    if isinstance(params, ParamVector):
        if train.n == 0 or (isinstance(alpha, (int, float)) and alpha == 0):
            return params.copy()
        out = inner_update(
            params.tensors(requires_grad=True), alpha, train, spec, n_steps, clip, create_graph=False
        )
        return ParamVector.from_tensors(out)
    weights = list(params)
    if train.n == 0 or (isinstance(alpha, (int, float)) and alpha == 0):
        return weights
    per_param = isinstance(alpha, (list, tuple))
    keep_graph = create_graph and not first_order
    for _ in range(n_steps):
        # Constants become leaves so the inner gradient exists even under no_grad.
        weights = [w if w.requires_grad else Tensor(w.value, requires_grad=True) for w in weights]
        with ad.enable_grad():
            loss = empirical_risk(weights, train, spec)
        grads = ad.grad(loss, weights, create_graph=keep_graph)
        norm = _global_norm(g.value for g in grads)
        if not np.isfinite(norm):
            raise ad.NonFiniteError("inner_update", "gradient norm")
        if clip is not None and norm > clip:
            scale = clip / norm
            grads = [g * scale for g in grads]
        if per_param:
            weights = [w - a * g for w, a, g in zip(weights, alpha, grads)]
        else:
            weights = [ad.sgd_step(w, alpha, g) for w, g in zip(weights, grads)]
    return weights


# --- episodes and objectives ----------------------------------------------


@dataclass(frozen=True)
class Episode:
    """One task's contribution to a meta-objective: adapt on ``train``, score on ``val``."""

    task_index: int
    shots: int
    train: Batch
    val: Batch


def draw_episode(
    data: Batch,
    max_shots: int,
    rng: np.random.Generator,
    val_size: int = 10,
    fixed_shots: int | None = None,
    task_index: int = 0,
) -> Episode:
    """Sample ``K ~ Unif{0..min(M, n)}`` and split ``data`` into train/val.

    Validation points come from outside the train subset when any remain;
    otherwise they are drawn with replacement from the whole set.
    """
    n = data.n
    cap = min(max_shots, n)
    if fixed_shots is None:
        k = int(rng.integers(0, cap + 1))
    else:
        k = min(int(fixed_shots), n)
    perm = rng.permutation(n)
    train_idx, rest = perm[:k], perm[k:]
    if rest.size:
        val_idx = rest[:val_size]
    elif n:
        val_idx = rng.integers(0, n, size=min(val_size, n))
    else:
        val_idx = rest
    return Episode(task_index, k, data.take(train_idx), data.take(val_idx))


def _mean_of(losses: list[Tensor]) -> Tensor:
    if not losses:
        return Tensor(0.0)
    total = losses[0]
    for term in losses[1:]:
        total = total + term
    return total * (1.0 / len(losses))


def meta_objective_vs(
    weights: Sequence[Tensor],
    policy: RatePolicy,
    episodes: Sequence[Episode],
    spec: MLPSpec,
    live: dict[str, Tensor] | None = None,
    n_steps: int = 1,
    clip: float | None = 10.0,
    first_order: bool = False,
) -> Tensor:
    """Mean post-adaptation validation risk over ``episodes``.

    Episodes whose validation set is empty (tasks with no data yet) add no
    term.  The result stays differentiable in ``weights`` and ``live``.
    """
    if not episodes:
        raise ValueError("meta-objective needs at least one episode")
    losses = []
    for ep in episodes:
        if ep.val.n == 0:
            continue
        alpha = policy.rate(ep.shots, live) if ep.train.n else 0.0
        adapted = inner_update(
            weights, alpha, ep.train, spec, n_steps, clip, create_graph=True, first_order=first_order
        )
        losses.append(empirical_risk(adapted, ep.val, spec))
    return _mean_of(losses)


def naive_objective(
    weights: Sequence[Tensor],
    alpha: float,
    episodes: Sequence[Episode],
    spec: MLPSpec,
    n_steps: int = 1,
    clip: float | None = 10.0,
) -> Tensor:
    """Variable-shot MAML with one shared step size for every shot count."""
    losses = []
    for ep in episodes:
        if ep.val.n:
            adapted = inner_update(weights, alpha, ep.train, spec, n_steps, clip)
            losses.append(empirical_risk(adapted, ep.val, spec))
    return _mean_of(losses)


def meta_gradients(objective: Tensor, named_leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Exact gradients of the meta-objective w.r.t. every named leaf."""
    if not np.isfinite(objective.value).all():
        raise ad.NonFiniteError("meta_objective")
    names = list(named_leaves)
    grads = ad.grad(objective, [named_leaves[k] for k in names])
    return {k: g.value for k, g in zip(names, grads)}


# --- outer optimizer ------------------------------------------------------


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None):
    norm = _global_norm(grads.values())
    if max_norm is None or norm <= max_norm or norm == 0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class Adam:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip: float | None = 10.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return updated copies of ``params``; clipping happens before the moments."""
        grads, _ = clip_by_global_norm(grads, self.clip)
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            else:
                v = self.v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


# --- learner state --------------------------------------------------------


class MetaLearner:
    """Meta-parameters, rate policy and optimizer state of one experiment."""

    def __init__(self, spec: MLPSpec, params: ParamVector, policy: RatePolicy, config: MetaOptimizerConfig):
        self.spec = spec
        self.params = params
        self.policy = policy
        self.config = config
        self.adam = Adam(config.outer_rate, tuple(config.adam_betas), config.adam_eps, config.grad_clip)

    def named_arrays(self) -> dict[str, np.ndarray]:
        named = {f"theta.{i}": a for i, a in enumerate(self.params.arrays())}
        named.update({f"policy.{k}": v for k, v in self.policy.learnables().items()})
        return named

    def set_named_arrays(self, named: dict[str, np.ndarray]) -> None:
        n = len(self.params.arrays())
        self.params = ParamVector.from_arrays([named[f"theta.{i}"] for i in range(n)])
        self.policy.set_learnables(
            {k[len("policy.") :]: v for k, v in named.items() if k.startswith("policy.")}
        )

    def objective(self, episodes: Sequence[Episode]) -> tuple[Tensor, dict[str, Tensor]]:
        leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in self.named_arrays().items()}
        n = len(self.params.arrays())
        weights = [leaves[f"theta.{i}"] for i in range(n)]
        live = {k[len("policy.") :]: t for k, t in leaves.items() if k.startswith("policy.")}
        cfg = self.config
        j = meta_objective_vs(
            weights, self.policy, episodes, self.spec, live, cfg.inner_steps, cfg.inner_clip, cfg.first_order
        )
        return j, leaves

    def gradients(self, episodes: Sequence[Episode]) -> tuple[float, dict[str, np.ndarray]]:
        j, leaves = self.objective(episodes)
        return j.item(), meta_gradients(j, leaves)

    def apply(self, grads: dict[str, np.ndarray]) -> None:
        self.set_named_arrays(self.adam.step(self.named_arrays(), grads))

    def adapt(self, data: Batch, shots: int | None = None) -> ParamVector:
        """Adapted parameters for ``data`` without recording a graph."""
        shots = data.n if shots is None else shots
        if data.n == 0:
            return self.params.copy()
        alpha = self.policy.rate(shots)
        if isinstance(alpha, Tensor):
            alpha = alpha.value.item()
        elif isinstance(alpha, list):
            alpha = [Tensor(a.value) for a in alpha]
        return inner_update(self.params, alpha, data, self.spec, self.config.inner_steps, self.config.inner_clip)


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(path, learner: MetaLearner) -> None:
    """Write all learner state as named float64 arrays in an ``.npz`` container."""
    arrays = {f"param/{k}": v for k, v in learner.named_arrays().items()}
    for k, v in learner.adam.m.items():
        arrays[f"adam_m/{k}"] = v
    for k, v in learner.adam.v.items():
        arrays[f"adam_v/{k}"] = v
    arrays["adam_step"] = np.array(float(learner.adam.step_count))
    arrays["__format__"] = np.array(CHECKPOINT_FORMAT)
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    arrays["__policy__"] = np.array(learner.policy.kind)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, learner: MetaLearner) -> MetaLearner:
    """Restore state saved by :func:`save_checkpoint` into ``learner``."""
    with np.load(path, allow_pickle=False) as data:
        if str(data["__format__"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a vsmeta checkpoint")
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        if str(data["__policy__"]) != learner.policy.kind:
            raise ValueError(f"checkpoint policy {data['__policy__']} != {learner.policy.kind}")
        named = {k[len("param/") :]: data[k] for k in data.files if k.startswith("param/")}
        learner.set_named_arrays(named)
        learner.adam.m = {k[len("adam_m/") :]: data[k] for k in data.files if k.startswith("adam_m/")}
        learner.adam.v = {k[len("adam_v/") :]: data[k] for k in data.files if k.startswith("adam_v/")}
        learner.adam.step_count = int(data["adam_step"])
    return learner
