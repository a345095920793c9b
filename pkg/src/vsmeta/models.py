"""Multilayer perceptrons, batches and empirical risk."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = ("tanh", "relu")
LOSSES = ("mse", "softmax-xent")


class EmptyBatchError(ValueError):
    """Empirical risk was requested on a batch with no rows."""


@dataclass(frozen=True)
class Batch:
    """``n`` input rows with regression targets (n, d_out) or class labels (n,)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if len(self.targets) != len(self.inputs):
            raise ValueError(
                f"inputs and targets disagree on n: {len(self.inputs)} vs {len(self.targets)}"
            )

    @property
    def n(self) -> int:
        return len(self.inputs)

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(self.inputs[idx], self.targets[idx])

    @staticmethod
    def concat(batches: Sequence["Batch"]) -> "Batch":
        return Batch(
            np.concatenate([b.inputs for b in batches]),
            np.concatenate([b.targets for b in batches]),
        )


@dataclass(frozen=True)
class MLPSpec:
    sizes: tuple[int, ...] = (1, 40, 40, 1)
    activation: str = "tanh"
    loss: str = "mse"

    def __post_init__(self):
        if len(self.sizes) < 2 or any(int(n) < 1 for n in self.sizes):
            raise ValueError(f"bad layer sizes {self.sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")

    @classmethod
    def regression(cls) -> "MLPSpec":
        return cls((1, 40, 40, 1), "tanh", "mse")

    @classmethod
    def classification(cls, d_in: int, n_classes: int) -> "MLPSpec":
        return cls((d_in, 64, 64, n_classes), "relu", "softmax-xent")


@dataclass
class ParamVector:
    """Weights and biases of an MLP, one ``(W, b)`` pair per layer.

    ``W`` has shape (fan_in, fan_out), so a layer computes ``x @ W + b``.
    """

    layers: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: W {w.shape} incompatible with b {b.shape}")
            if i and self.layers[i - 1][0].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[0]} does not chain")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.layers[0][0].shape[0],) + tuple(w.shape[1] for w, _ in self.layers)

    @property
    def total_count(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def arrays(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]``."""
        return [a for pair in self.layers for a in pair]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "ParamVector":
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        return cls([(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)])

    @classmethod
    def from_flat(cls, sizes: Sequence[int], flat: np.ndarray) -> "ParamVector":
        flat = np.asarray(flat, dtype=np.float64)
        expected = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
        if flat.size != expected:
            raise ValueError(f"expected {expected} values for sizes {tuple(sizes)}, got {flat.size}")
        layers, pos = [], 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out).copy()
            pos += fan_in * fan_out
            b = flat[pos : pos + fan_out].copy()
            pos += fan_out
            layers.append((w, b))
        return cls(layers)

    def tensors(self, requires_grad: bool = True) -> list[Tensor]:
        return [Tensor(a.copy(), requires_grad=requires_grad) for a in self.arrays()]

    @classmethod
    def from_tensors(cls, tensors: Sequence[Tensor]) -> "ParamVector":
        return cls.from_arrays([t.value for t in tensors])

    def copy(self) -> "ParamVector":
        return ParamVector([(w.copy(), b.copy()) for w, b in self.layers])


def init_params(spec: MLPSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    layers = []
    for fan_in, fan_out in zip(spec.sizes[:-1], spec.sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return ParamVector(layers)


def _as_weights(params) -> list[Tensor]:
    if isinstance(params, ParamVector):
        return params.tensors(requires_grad=False)
    return [ad.as_tensor(p) for p in params]


def mlp_forward(params, inputs, activation: str = "tanh") -> Tensor:
    """Predictions ``(n, d_out)`` of the MLP; the last layer is linear.

    ``params`` is a :class:`ParamVector` or a flat ``[W0, b0, ...]`` sequence
    of tensors (the latter keeps the computation on the tape).
    """
    weights = _as_weights(params)
    x = ad.as_tensor(inputs)
    if x.ndim != 2 or x.shape[1] != weights[0].shape[0]:
        raise ValueError(
            f"input shape {x.shape} does not match first layer width {weights[0].shape[0]}"
        )
    act = ad.tanh if activation == "tanh" else ad.relu
    n_layers = len(weights) // 2
    for i in range(n_layers):
        x = ad.linear(x, weights[2 * i], weights[2 * i + 1])
        if i < n_layers - 1:
            x = act(x)
    return x


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels.astype(np.int64)] = 1.0
    return out


def loss_from_predictions(pred: Tensor, targets: np.ndarray, loss: str) -> Tensor:
    if loss == "mse":
        return ad.mean_squared_error(pred, targets)
    if loss == "softmax-xent":
        log_probs = pred - ad.logsumexp(pred, axis=1)
        return -(log_probs * _one_hot(np.asarray(targets), pred.shape[1])).sum(axis=1).mean()
    raise ValueError(f"unknown loss {loss!r}")


def empirical_risk(params, batch: Batch, spec: MLPSpec) -> Tensor:
    """Mean per-example loss of the model on ``batch``."""
    if batch.n == 0:
        raise EmptyBatchError("empirical risk is undefined on an empty batch; use the zero-shot path")
    pred = mlp_forward(params, batch.inputs, spec.activation)
    return loss_from_predictions(pred, batch.targets, spec.loss)


def accuracy(params, batch: Batch, spec: MLPSpec) -> float:
    with ad.no_grad():
        pred = mlp_forward(params, batch.inputs, spec.activation).value
    return float(np.mean(pred.argmax(axis=1) == np.asarray(batch.targets)))
