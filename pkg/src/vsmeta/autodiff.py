"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every operation on a :class:`Tensor` that depends on a tensor with
``requires_grad`` is recorded on the fly.  Backward rules are themselves
written with tensor operations, so calling :func:`grad` with
``create_graph=True`` records the backward pass and the result can be
differentiated again.  This is what lets the meta-gradient flow through an
inner gradient step.

All values are float64.  A non-finite value produced by any operation raises
:class:`NonFiniteError` naming the operation.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "as_tensor",
    "grad",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "finite_diff_check",
    "tanh",
    "relu",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "logsumexp",
    "sum_to",
    "broadcast_to",
    "linear",
    "mean_squared_error",
    "sgd_step",
    "vdot",
    "scaled",
    "prod3",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        self.detail = detail
        msg = f"non-finite value produced by '{op}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def _set_grad(flag: bool):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = flag
    try:
        yield
    finally:
        _grad_enabled = prev


def no_grad():
    """Context manager that stops recording operations."""
    return _set_grad(False)


def enable_grad():
    return _set_grad(True)


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("value", "parents", "backward_fn", "op", "requires_grad")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple = ()
        self.backward_fn = None
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor({self.value!r}{flag}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if type(x) is Tensor else Tensor(x)


def _record(value, op: str, parents: tuple, backward_fn: Callable) -> Tensor:
    if type(value) is not np.ndarray or value.dtype != np.float64:
        value = np.asarray(value, dtype=np.float64)
    # an overflowing sum falls through to the exact check
    if not math.isfinite(np.add.reduce(value, axis=None)) and not np.isfinite(value).all():
        raise NonFiniteError(op)
    # Built without __init__: this is the hottest path of the engine.
    out = _new_tensor(Tensor)
    out.value = value
    out.op = op
    out.parents = ()
    out.backward_fn = None
    out.requires_grad = False
    if _grad_enabled:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out.parents = parents
                out.backward_fn = backward_fn
                break
    return out


_new_tensor = object.__new__


# --- shape plumbing -------------------------------------------------------


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to ``shape`` (inverse of numpy broadcasting)."""
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    v = x.value
    lead = v.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and v.shape[i + lead] != 1
    )
    out = v.sum(axis=axes, keepdims=True)
    if lead:
        out = out.reshape(out.shape[lead:])
    src_shape = x.shape
    return _record(out.reshape(shape), "sum_to", (x,), lambda g: (broadcast_to(g, src_shape),))


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    src_shape = x.shape
    return _record(
        np.broadcast_to(x.value, shape).copy(),
        "broadcast_to",
        (x,),
        lambda g: (sum_to(g, src_shape),),
    )


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    src_shape = x.shape
    return _record(x.value.reshape(shape), "reshape", (x,), lambda g: (reshape(g, src_shape),))


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _record(x.value.T, "transpose", (x,), lambda g: (transpose(g),))


def take(x: Tensor, index) -> Tensor:
    """``x[index]``; the gradient is scattered back (repeated indices add up)."""
    x = as_tensor(x)
    return _record(x.value[index], "index", (x,), lambda g: (scatter(g, index, x.shape),))


def scatter(g: Tensor, index, shape: tuple) -> Tensor:
    """Zeros of ``shape`` with ``g`` added at ``index``; adjoint of :func:`take`."""
    out = np.zeros(shape)
    np.add.at(out, index, g.value)
    return _record(out, "scatter", (g,), lambda h: (take(h, index),))


# --- arithmetic -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.value + b.value, "add", (a, b), lambda g: (
            sum_to(g, sa) if a.requires_grad else None,
            sum_to(g, sb) if b.requires_grad else None,
        ),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.value - b.value, "sub", (a, b), lambda g: (
            sum_to(g, sa) if a.requires_grad else None,
            neg(sum_to(g, sb)) if b.requires_grad else None,
        ),
    )


def sgd_step(w, a, g) -> Tensor:
    """``w - a * g`` for a scalar rate ``a`` as one node."""
    w, a, g = as_tensor(w), as_tensor(a), as_tensor(g)
    if a.value.size != 1 or w.shape != g.shape:
        raise ValueError(f"sgd_step expects a scalar rate and matching shapes, got {a.shape}, {w.shape}, {g.shape}")
    return _record(
        w.value - a.value * g.value,
        "sgd_step",
        (w, a, g),
        lambda h: (
            h if w.requires_grad else None,
            reshape(vdot(h, g, -1.0), a.shape) if a.requires_grad else None,
            scaled(h, a, -1.0) if g.requires_grad else None,
        ),
    )


def vdot(a, b, c: float = 1.0) -> Tensor:
    """``c * sum(a * b)`` as one scalar node."""
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        c * np.vdot(a.value, b.value),
        "vdot",
        (a, b),
        lambda h: (
            scaled(b, h, c) if a.requires_grad else None,
            scaled(a, h, c) if b.requires_grad else None,
        ),
    )


def scaled(x, a, c: float = 1.0) -> Tensor:
    """``c * a * x`` for a scalar tensor ``a`` as one node."""
    x, a = as_tensor(x), as_tensor(a)
    return _record(
        (c * a.value.item()) * x.value,
        "scaled",
        (x, a),
        lambda h: (
            scaled(h, a, c) if x.requires_grad else None,
            reshape(vdot(h, x, c), a.shape) if a.requires_grad else None,
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.value, "neg", (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.value * b.value,
        "mul",
        (a, b),
        lambda g: (
            sum_to(g * b, sa) if a.requires_grad else None,
            sum_to(g * a, sb) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value / b.value
    return _record(
        value,
        "div",
        (a, b),
        lambda g: (
            sum_to(g / b, sa) if a.requires_grad else None,
            neg(sum_to(g * a / (b * b), sb)) if b.requires_grad else None,
        ),
    )


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value**exponent
    return _record(
        value,
        "pow",
        (a,),
        lambda g: (g * (exponent * power(a, exponent - 1.0)),),
    )


def _check_2d(a, b, sa, sb, name):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"{name} expects 2-D operands, got {a.shape} and {b.shape}")
    if sa != sb:
        raise ValueError(f"{name} shape mismatch: {a.shape} and {b.shape}")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_2d(a, b, a.shape[-1], b.shape[0], "matmul")
    return _record(
        a.value @ b.value,
        "matmul",
        (a, b),
        lambda g: (
            matmul_nt(g, b) if a.requires_grad else None,
            matmul_tn(a, g) if b.requires_grad else None,
        ),
    )


def matmul_nt(a, b) -> Tensor:
    """``a @ b.T`` as one node."""
    a, b = as_tensor(a), as_tensor(b)
    _check_2d(a, b, a.shape[-1], b.shape[-1], "matmul_nt")
    return _record(
        a.value @ b.value.T,
        "matmul_nt",
        (a, b),
        lambda g: (
            matmul(g, b) if a.requires_grad else None,
            matmul_tn(g, a) if b.requires_grad else None,
        ),
    )


def matmul_tn(a, b) -> Tensor:
    """``a.T @ b`` as one node."""
    a, b = as_tensor(a), as_tensor(b)
    _check_2d(a, b, a.shape[0], b.shape[0], "matmul_tn")
    return _record(
        a.value.T @ b.value,
        "matmul_tn",
        (a, b),
        lambda g: (
            matmul_nt(b, g) if a.requires_grad else None,
            matmul(a, g) if b.requires_grad else None,
        ),
    )


def linear(x, w, b) -> Tensor:
    """Affine layer ``x @ w + b`` with ``b`` broadcast over rows."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check_2d(x, w, x.shape[-1], w.shape[0], "linear")
    if b.shape != (w.shape[1],):
        raise ValueError(f"linear bias shape {b.shape} does not match {w.shape}")
    return _record(
        x.value @ w.value + b.value,
        "linear",
        (x, w, b),
        lambda g: (
            matmul_nt(g, w) if x.requires_grad else None,
            matmul_tn(x, g) if w.requires_grad else None,
            reduce_sum(g, axis=0) if b.requires_grad else None,
        ),
    )


# --- elementwise nonlinearities --------------------------------------------


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _record(np.tanh(a.value), "tanh", (a,), None)
    if out.requires_grad:
        out.backward_fn = lambda g: (tanh_backward(out, g),)
    return out


def tanh_backward(out, g) -> Tensor:
    """``g * (1 - out**2)``: the tanh vector-Jacobian product as one node."""
    out, g = as_tensor(out), as_tensor(g)
    slope = 1.0 - out.value * out.value
    return _record(
        g.value * slope,
        "tanh_backward",
        (out, g),
        lambda h: (
            prod3(h, g, out, -2.0) if out.requires_grad else None,
            h * slope if g.requires_grad else None,
        ),
    )


def prod3(a, b, c, k: float = 1.0) -> Tensor:
    """Elementwise ``k * a * b * c`` for same-shaped operands as one node."""
    a, b, c = as_tensor(a), as_tensor(b), as_tensor(c)
    if not a.shape == b.shape == c.shape:
        raise ValueError(f"prod3 expects equal shapes, got {a.shape}, {b.shape}, {c.shape}")
    return _record(
        k * a.value * b.value * c.value,
        "prod3",
        (a, b, c),
        lambda h: (
            prod3(h, b, c, k) if a.requires_grad else None,
            prod3(h, a, c, k) if b.requires_grad else None,
            prod3(h, a, b, k) if c.requires_grad else None,
        ),
    )


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.value > 0).astype(np.float64)
    return _record(a.value * mask, "relu", (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        value = np.exp(a.value)
    out = _record(value, "exp", (a,), None)
    if out.requires_grad:
        out.backward_fn = lambda g: (g * out,)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    return _record(value, "log", (a,), lambda g: (g / a,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    v = a.value
    value = np.exp(-np.logaddexp(0.0, -v))
    out = _record(value, "sigmoid", (a,), None)
    if out.requires_grad:
        out.backward_fn = lambda g: (g * out * (1.0 - out),)
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    a = as_tensor(a)
    return _record(np.logaddexp(0.0, a.value), "softplus", (a,), lambda g: (g * sigmoid(a),))


def logsumexp(a, axis: int = -1) -> Tensor:
    """Row-wise log-sum-exp with max subtraction; keeps the reduced axis."""
    a = as_tensor(a)
    m = a.value.max(axis=axis, keepdims=True)
    value = m + np.log(np.exp(a.value - m).sum(axis=axis, keepdims=True))
    out = _record(value, "logsumexp", (a,), None)
    if out.requires_grad:
        out.backward_fn = lambda g: (g * exp(a - out),)
    return out


def mean_squared_error(pred, target) -> Tensor:
    """Mean of ``(pred - target)**2`` over all entries; ``target`` is constant."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    if pred.value.size == 0:
        raise ValueError("mean squared error of an empty array")
    resid = pred.value - target
    coef = 2.0 / resid.size
    return _record(
        np.mean(resid * resid),
        "mse",
        (pred,),
        lambda g: (mse_backward(pred, g, target, coef),),
    )


def mse_backward(pred, g, target, coef: float) -> Tensor:
    """``g * coef * (pred - target)`` for a scalar ``g`` as one node."""
    pred, g = as_tensor(pred), as_tensor(g)
    return _record(
        (g.value.item() * coef) * (pred.value - target),
        "mse_backward",
        (pred, g),
        lambda h: (
            scaled(h, g, coef) if pred.requires_grad else None,
            reshape(vdot(h, pred - target, coef), g.shape) if g.requires_grad else None,
        ),
    )


# --- reductions -----------------------------------------------------------


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    src_shape = a.shape
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(g.value, axis).shape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(src_shape))
        return (broadcast_to(g, src_shape),)

    return _record(value, "sum", (a,), backward)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    if n == 0:
        raise ValueError("mean over an empty axis")
    return reduce_sum(a, axis, keepdims) * (1.0 / n)


# --- reverse pass ---------------------------------------------------------


def _topological(output: Tensor, targets: set) -> list[Tensor]:
    """Ancestors of ``output`` that are in, or descend from, ``targets``,
    ordered parents first."""
    # Tensors hash by identity, so they serve directly as set members.
    order: list[Tensor] = []
    seen: set = set()
    relevant: set = set(targets)
    stack = [(output, False)]
    pop, push = stack.pop, stack.append
    while stack:
        node, expanded = pop()
        if expanded:
            if node in relevant:
                order.append(node)
                continue
            for p in node.parents:
                if p in relevant:
                    relevant.add(node)
                    order.append(node)
                    break
            continue
        if node in seen:
            continue
        seen.add(node)
        push((node, True))
        for p in node.parents:
            if p.requires_grad and p not in seen:
                push((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    create_graph: bool = False,
    seed: Tensor | None = None,
) -> list[Tensor]:
    """Gradient of scalar ``output`` with respect to each of ``inputs``.

    With ``create_graph=True`` the backward computation is itself recorded,
    so the returned tensors can be differentiated again.  Inputs that do not
    influence ``output`` get an exact zero gradient.
    """
    if seed is None and output.value.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    for x in inputs:
        if not isinstance(x, Tensor):
            raise TypeError("grad inputs must be Tensors")
    grads: dict[Tensor, Tensor] = {}
    if output.requires_grad:
        grads[output] = seed if seed is not None else Tensor(np.ones_like(output.value))
        with _set_grad(create_graph):
            order = _topological(output, set(inputs))
            keep = set(order)
            for node in reversed(order):
                g = grads.get(node)
                if g is None or node.backward_fn is None:
                    continue
                for parent, pg in zip(node.parents, node.backward_fn(g)):
                    if pg is None or parent not in keep:
                        continue
                    prev = grads.get(parent)
                    if prev is None:
                        grads[parent] = pg
                    elif create_graph:
                        grads[parent] = prev + pg
                    else:
                        grads[parent] = _record(prev.value + pg.value, "add", (), None)
    out = []
    for x in inputs:
        g = grads.get(x)
        out.append(g if g is not None else Tensor(np.zeros_like(x.value)))
    return out


def finite_diff_check(
    fn: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-5,
    floor: float = 1e-12,
) -> float:
    """Max relative error between the tape gradient and central differences.

    ``fn`` maps a flat parameter tensor to a scalar tensor.  The error per
    coordinate is ``|analytic - fd| / (|fd| + floor)``.
    """
    point = np.array(point, dtype=np.float64).ravel()
    x = Tensor(point.copy(), requires_grad=True)
    (analytic,) = grad(fn(x), [x])
    analytic = analytic.value
    # Probes stay differentiable so that fn may take gradients internally.
    fd = np.empty_like(point)
    for i in range(point.size):
        hi = point.copy()
        lo = point.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = fn(Tensor(hi, requires_grad=True)).item()
        f_lo = fn(Tensor(lo, requires_grad=True)).item()
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NonFiniteError("finite_diff_check", f"probe at coordinate {i}")
        fd[i] = (f_hi - f_lo) / (2.0 * step)
    if point.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - fd) / (np.abs(fd) + floor)))


def value_and_grad(fn: Callable[..., Tensor], *args) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn`` at numpy ``args`` and return its value and gradients."""
    leaves = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in args]
    out = fn(*leaves)
    return out.item(), [g.value for g in grad(out, leaves)]


def leaves(arrays: Iterable[np.ndarray]) -> list[Tensor]:
    return [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
