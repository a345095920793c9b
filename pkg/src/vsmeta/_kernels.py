"""Monte-Carlo inner loops used by the verification oracles.

Each kernel has two implementations with identical contracts: an explicit-loop
version compiled with numba, and a vectorized numpy version.  Set
``VSMETA_DISABLE_NUMBA=1`` (or run without numba installed) to use numpy.
``BACKEND`` reports which one is active; both are importable directly as
``numba_impl`` / ``numpy_impl`` for cross-checking.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_disabled = os.environ.get("VSMETA_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")
BACKEND = "numba" if HAVE_NUMBA and not _disabled else "numpy"

# Rows per chunk in the numpy fallbacks; bounds peak memory.
_CHUNK_ELEMS = 4_000_000


def _layer_offsets(sizes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n_layers = len(sizes) - 1
    w_off = np.zeros(n_layers, dtype=np.int64)
    b_off = np.zeros(n_layers, dtype=np.int64)
    pos = 0
    for layer in range(n_layers):
        w_off[layer] = pos
        pos += sizes[layer] * sizes[layer + 1]
        b_off[layer] = pos
        pos += sizes[layer + 1]
    return w_off, b_off


# --- grouped gradient moments ---------------------------------------------


def _grouped_grad_moments_loops(flat, sizes, use_relu, inputs, targets, group, w_off, b_off):
    n_layers = sizes.shape[0] - 1
    n_params = flat.shape[0]
    width = 0
    for k in range(sizes.shape[0]):
        if sizes[k] > width:
            width = sizes[k]
    acts = np.zeros((n_layers + 1, width))
    deltas = np.zeros((n_layers + 1, width))
    gbuf = np.zeros(n_params)
    mean = np.zeros(n_params)
    m2 = np.zeros(n_params)
    d_out = sizes[n_layers]
    n_groups = inputs.shape[0] // group
    inv_group = 1.0 / group
    for gi in range(n_groups):
        gbuf[:] = 0.0
        for e in range(group):
            row = gi * group + e
            for i in range(sizes[0]):
                acts[0, i] = inputs[row, i]
            for layer in range(n_layers):
                fan_in = sizes[layer]
                fan_out = sizes[layer + 1]
                wo = w_off[layer]
                src = acts[layer]
                dst = acts[layer + 1]
                for j in range(fan_out):
                    dst[j] = flat[b_off[layer] + j]
                for i in range(fan_in):
                    a = src[i]
                    w_row = flat[wo + i * fan_out : wo + (i + 1) * fan_out]
                    for j in range(fan_out):
                        dst[j] += a * w_row[j]
                if layer < n_layers - 1:
                    for j in range(fan_out):
                        if use_relu:
                            dst[j] = dst[j] if dst[j] > 0.0 else 0.0
                        else:
                            dst[j] = np.tanh(dst[j])
            for k in range(d_out):
                deltas[n_layers, k] = 2.0 * (acts[n_layers, k] - targets[row, k]) / d_out
            for layer in range(n_layers - 1, -1, -1):
                fan_in = sizes[layer]
                fan_out = sizes[layer + 1]
                wo = w_off[layer]
                bo = b_off[layer]
                src = acts[layer]
                d_next = deltas[layer + 1]
                d_here = deltas[layer]
                for j in range(fan_out):
                    gbuf[bo + j] += d_next[j]
                for i in range(fan_in):
                    a = src[i]
                    w_row = flat[wo + i * fan_out : wo + (i + 1) * fan_out]
                    g_row = gbuf[wo + i * fan_out : wo + (i + 1) * fan_out]
                    s = 0.0
                    for j in range(fan_out):
                        g_row[j] += a * d_next[j]
                        s += w_row[j] * d_next[j]
                    if layer > 0:
                        if use_relu:
                            d_here[i] = s if a > 0.0 else 0.0
                        else:
                            d_here[i] = s * (1.0 - a * a)
        inv_count = 1.0 / (gi + 1)
        for p in range(n_params):
            v = gbuf[p] * inv_group
            diff = v - mean[p]
            mean[p] += diff * inv_count
            m2[p] += diff * (v - mean[p])
    return n_groups, mean, m2


def _merge_moments(n_a, mean_a, m2_a, n_b, mean_b, m2_b):
    n = n_a + n_b
    if n == 0:
        return 0, mean_a, m2_a
    delta = mean_b - mean_a
    mean = mean_a + delta * (n_b / n)
    m2 = m2_a + m2_b + delta * delta * (n_a * n_b / n)
    return n, mean, m2


def _grouped_grad_moments_numpy(flat, sizes, use_relu, inputs, targets, group, w_off, b_off):
    n_layers = len(sizes) - 1
    n_params = flat.shape[0]
    n_groups = inputs.shape[0] // group
    weights = [
        flat[w_off[k] : w_off[k] + sizes[k] * sizes[k + 1]].reshape(sizes[k], sizes[k + 1])
        for k in range(n_layers)
    ]
    biases = [flat[b_off[k] : b_off[k] + sizes[k + 1]] for k in range(n_layers)]
    per_group = max(1, _CHUNK_ELEMS // max(1, n_params + group * int(np.max(sizes))))
    count, mean, m2 = 0, np.zeros(n_params), np.zeros(n_params)
    for start in range(0, n_groups, per_group):
        stop = min(n_groups, start + per_group)
        rows = slice(start * group, stop * group)
        acts = [inputs[rows]]
        for k in range(n_layers):
            z = acts[-1] @ weights[k] + biases[k]
            if k < n_layers - 1:
                z = np.maximum(z, 0.0) if use_relu else np.tanh(z)
            acts.append(z)
        n_chunk = stop - start
        delta = 2.0 * (acts[-1] - targets[rows]) / sizes[-1]
        blocks = [None] * (2 * n_layers)
        for k in range(n_layers - 1, -1, -1):
            a = acts[k].reshape(n_chunk, group, sizes[k])
            d = delta.reshape(n_chunk, group, sizes[k + 1])
            blocks[2 * k] = (np.matmul(a.transpose(0, 2, 1), d) / group).reshape(n_chunk, -1)
            blocks[2 * k + 1] = d.mean(axis=1)
            if k > 0:
                back = delta @ weights[k].T
                delta = back * (acts[k] > 0) if use_relu else back * (1.0 - acts[k] ** 2)
        g = np.concatenate(blocks, axis=1)
        c_mean = g.mean(axis=0)
        c_m2 = ((g - c_mean) ** 2).sum(axis=0)
        count, mean, m2 = _merge_moments(count, mean, m2, n_chunk, c_mean, c_m2)
    return n_groups, mean, m2


# --- Monte-Carlo squared error over a step-size grid ------------------------


def _mse_grid_loops(sample_grads, pop_grads, alphas, beta):
    n, d = sample_grads.shape
    means = np.zeros(alphas.shape[0])
    sems = np.zeros(alphas.shape[0])
    for a_idx in range(alphas.shape[0]):
        alpha = alphas[a_idx]
        mean = 0.0
        m2 = 0.0
        for i in range(n):
            sq = 0.0
            for k in range(d):
                r = alpha * sample_grads[i, k] - beta * pop_grads[i, k]
                sq += r * r
            diff = sq - mean
            mean += diff / (i + 1)
            m2 += diff * (sq - mean)
        means[a_idx] = mean
        sems[a_idx] = np.sqrt(m2 / (n - 1) / n) if n > 1 else 0.0
    return means, sems


def _mse_grid_numpy(sample_grads, pop_grads, alphas, beta):
    n, d = sample_grads.shape
    per = max(1, _CHUNK_ELEMS // max(1, n * d))
    means = np.empty(alphas.shape[0])
    sems = np.empty(alphas.shape[0])
    for start in range(0, alphas.shape[0], per):
        a = alphas[start : start + per, None, None]
        sq = ((a * sample_grads[None] - beta * pop_grads[None]) ** 2).sum(axis=2)
        means[start : start + per] = sq.mean(axis=1)
        sems[start : start + per] = sq.std(axis=1, ddof=1) / np.sqrt(n) if n > 1 else 0.0
    return means, sems


numpy_impl = SimpleNamespace(
    grouped_grad_moments=_grouped_grad_moments_numpy,
    mse_grid=_mse_grid_numpy,
)

if HAVE_NUMBA:
    numba_impl = SimpleNamespace(
        grouped_grad_moments=numba.njit(cache=True, fastmath=True)(_grouped_grad_moments_loops),
        mse_grid=numba.njit(cache=True)(_mse_grid_loops),
    )
else:  # pragma: no cover
    numba_impl = None

_impl = numba_impl if BACKEND == "numba" else numpy_impl


def grouped_grad_moments(flat, sizes, use_relu, inputs, targets, group, impl=None):
    """Moments of the ``group``-averaged per-example MSE gradient of an MLP.

    Rows of ``inputs``/``targets`` are split into consecutive groups of size
    ``group``; each group's mean gradient (flattened ``[W0, b0, W1, ...]``) is
    one sample.  Returns ``(n_groups, mean, m2)`` where ``m2`` is the sum of
    squared deviations from the mean (Welford / Chan).
    """
    impl = impl or _impl
    sizes = np.asarray(sizes, dtype=np.int64)
    w_off, b_off = _layer_offsets(sizes)
    flat = np.ascontiguousarray(flat, dtype=np.float64)
    inputs = np.ascontiguousarray(inputs, dtype=np.float64).reshape(-1, sizes[0])
    targets = np.ascontiguousarray(targets, dtype=np.float64).reshape(-1, sizes[-1])
    if group < 1:
        raise ValueError("group must be >= 1")
    n, mean, m2 = impl.grouped_grad_moments(flat, sizes, bool(use_relu), inputs, targets, int(group), w_off, b_off)
    return int(n), mean, m2


def mse_grid(sample_grads, pop_grads, alphas, beta, impl=None):
    """Mean and standard error of ``||alpha*g_hat - beta*g||^2`` for each alpha."""
    impl = impl or _impl
    return impl.mse_grid(
        np.ascontiguousarray(sample_grads, dtype=np.float64),
        np.ascontiguousarray(pop_grads, dtype=np.float64),
        np.ascontiguousarray(alphas, dtype=np.float64),
        float(beta),
    )
