"""Brute-force checks of the shot-scaled learning-rate rule and the 1/s variance law.

The central object is the mean-squared distance between an ``s``-shot
gradient step and the ideal population step,

    MSE(alpha; s) = E || alpha * g_s - beta_star * g ||^2 ,

which decomposes into ``alpha^2 * C1 / s + (alpha - beta_star)^2 * C2``.  The
closed-form minimizer is ``(1 - 1/(1 + (C2/C1) s)) * beta_star``.  Here the
minimizer is found by grid search over Monte-Carlo estimates instead, on a
family where the population gradient ``g`` is known exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import _kernels
from . import autodiff as ad
from .models import Batch, MLPSpec, ParamVector, empirical_risk
from .tasks import TaskSpec, draw_points

# Above this shot count the linear family samples X^T X from a Wishart
# distribution instead of materializing s rows per draw.
_WISHART_MIN_SHOTS = 256


class GridCoverageError(ValueError):
    """The step-size grid does not cover ``[0, beta_star]`` densely enough."""


# --- task families ---------------------------------------------------------


@dataclass
class LinearGaussianFamily:
    """Linear regression tasks with Gaussian inputs and noise.

    Task weights ``w ~ N(w_mean, task_std^2 I)``, inputs ``x ~ N(0, I_dim)``,
    targets ``y = x.w + noise_std * N(0, 1)``, loss ``0.5 * (x.theta - y)^2``.
    The population gradient is ``theta - w``, so the ideal step with rate 1
    lands exactly on ``w``.
    """

    dim: int = 3
    task_std: float = 0.5
    noise_std: float = 0.5
    w_mean: np.ndarray | None = None

    def __post_init__(self):
        self.w_mean = np.zeros(self.dim) if self.w_mean is None else np.asarray(self.w_mean, float)

    def sample_task_weights(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.w_mean + self.task_std * rng.standard_normal((n, self.dim))

    def beta_star(self) -> float:
        # E f_t(theta - b g) = 0.5 (1 - b)^2 E||theta - w||^2 + const
        return 1.0

    def exact_c1_c2(self, theta) -> tuple[float, float]:
        theta = np.asarray(theta, float)
        c2 = float(np.sum((theta - self.w_mean) ** 2) + self.task_std**2 * self.dim)
        c1 = (self.dim + 1) * c2 + self.noise_std**2 * self.dim
        return c1, c2

    def per_example_grads(self, theta, w: np.ndarray, n: int, rng) -> np.ndarray:
        x = rng.standard_normal((n, self.dim))
        y = x @ w + self.noise_std * rng.standard_normal(n)
        return (x @ np.asarray(theta, float) - y)[:, None] * x

    def shot_gradients(self, theta, shots: int, n_draws: int, rng) -> tuple[np.ndarray, np.ndarray]:
        """``n_draws`` pairs of (``shots``-shot mean gradient, population gradient).

        Every draw uses a fresh task.
        """
        theta = np.asarray(theta, float)
        w = self.sample_task_weights(n_draws, rng)
        delta = theta - w
        if shots < _WISHART_MIN_SHOTS:
            out = np.empty((n_draws, self.dim))
            per = max(1, 2_000_000 // (shots * self.dim))
            for start in range(0, n_draws, per):
                stop = min(n_draws, start + per)
                x = rng.standard_normal((stop - start, shots, self.dim))
                eps = self.noise_std * rng.standard_normal((stop - start, shots))
                resid = np.einsum("nsd,nd->ns", x, delta[start:stop]) - eps
                out[start:stop] = np.einsum("ns,nsd->nd", resid, x) / shots
            return out, delta
        # g_s = (X^T X delta - X^T eps) / s with X^T X ~ Wishart(s, I) and
        # X^T eps | X ~ N(0, noise^2 X^T X).
        gram = stats.wishart(df=shots, scale=np.eye(self.dim)).rvs(size=n_draws, random_state=rng)
        gram = np.asarray(gram).reshape(n_draws, self.dim, self.dim)
        chol = np.linalg.cholesky(gram)
        noise = self.noise_std * np.einsum("nij,nj->ni", chol, rng.standard_normal((n_draws, self.dim)))
        return (np.einsum("nij,nj->ni", gram, delta) - noise) / shots, delta


@dataclass
class FixedDataFamily:
    """One task whose data distribution is uniform over a fixed batch.

    The population gradient is the exact full-batch gradient.  With a single
    datapoint every sampled gradient equals it, so the variance is zero.
    """

    batch: Batch
    spec: MLPSpec
    params: ParamVector

    def _per_example(self) -> np.ndarray:
        rows = []
        for i in range(self.batch.n):
            w = self.params.tensors()
            loss = empirical_risk(w, self.batch.take([i]), self.spec)
            rows.append(np.concatenate([g.value.ravel() for g in ad.grad(loss, w)]))
        return np.array(rows)

    def per_example_grads(self, theta, w, n: int, rng) -> np.ndarray:
        grads = self._per_example()
        return grads[rng.integers(0, len(grads), size=n)]

    def sample_task_weights(self, n: int, rng) -> np.ndarray:
        return np.zeros((n, 0))

    def shot_gradients(self, theta, shots: int, n_draws: int, rng):
        grads = self._per_example()
        idx = rng.integers(0, len(grads), size=(n_draws, shots))
        pop = np.broadcast_to(grads.mean(axis=0), (n_draws, grads.shape[1]))
        return grads[idx].mean(axis=1), np.array(pop)


# --- C1 / C2 --------------------------------------------------------------


def moments_to_constants(mean: np.ndarray, m2: np.ndarray, n: int) -> tuple[float, float]:
    """Trace of the unbiased covariance estimate and the squared mean norm."""
    if n < 2:
        raise ValueError("need at least two samples per task")
    if not (np.isfinite(mean).all() and np.isfinite(m2).all()):
        raise ad.NonFiniteError("estimate_c1_c2", "per-example gradients")
    return float(np.sum(m2) / (n - 1)), float(np.sum(mean * mean))


def estimate_c1_c2(family, theta, n_tasks: int, n_per_task: int, rng) -> tuple[float, float]:
    """Monte-Carlo ``(C1, C2)``: per task, the summed per-coordinate sample
    variance of per-example gradients and the squared norm of their mean,
    each averaged over ``n_tasks`` tasks."""
    if n_per_task < 2:
        raise ValueError("n_per_task must be >= 2")
    c1 = c2 = 0.0
    weights = family.sample_task_weights(n_tasks, rng)
    for t in range(n_tasks):
        g = family.per_example_grads(theta, weights[t], n_per_task, rng)
        # Shifting by one row keeps identical rows at exactly zero variance.
        d = g - g[0]
        shift = d.mean(axis=0)
        a, b = moments_to_constants(g[0] + shift, ((d - shift) ** 2).sum(axis=0), n_per_task)
        c1 += a
        c2 += b
    return c1 / n_tasks, c2 / n_tasks


def estimate_c1_c2_mlp(
    tasks: Sequence[TaskSpec], params: ParamVector, spec: MLPSpec, n_per_task: int, rng
) -> tuple[float, float]:
    """``(C1, C2)`` for an MSE-trained MLP over the given regression tasks."""
    c1 = c2 = 0.0
    for task in tasks:
        batch = draw_points(task, n_per_task, rng)
        n, mean, m2 = _kernels.grouped_grad_moments(
            params.flat(), spec.sizes, spec.activation == "relu", batch.inputs, batch.targets, 1
        )
        a, b = moments_to_constants(mean, m2, n)
        c1 += a
        c2 += b
    return c1 / len(tasks), c2 / len(tasks)


def closed_form_alpha(c1: float, c2: float, beta_star: float, shots: float) -> float:
    if shots <= 0:
        return 0.0
    if c1 == 0:
        return beta_star
    return (1.0 - 1.0 / (1.0 + (c2 / c1) * shots)) * beta_star


# --- grid-search oracle ---------------------------------------------------


@dataclass
class OracleResult:
    shots: int
    alpha: float
    grid: np.ndarray
    mse: np.ndarray
    sem: np.ndarray
    at_edge: bool

    def curvature(self, half_width: int = 10) -> float:
        """Second-order coefficient of a quadratic fit around the minimizer."""
        i = int(np.argmin(self.mse))
        lo, hi = max(0, i - half_width), min(len(self.grid), i + half_width + 1)
        return float(np.polyfit(self.grid[lo:hi], self.mse[lo:hi], 2)[0])


def default_grid(beta_star: float, n: int = 1001) -> np.ndarray:
    return np.linspace(0.0, beta_star, n)


def _check_grid(grid: np.ndarray, beta_star: float) -> None:
    if grid.size < 200:
        raise GridCoverageError(f"grid has {grid.size} points; need at least 200")
    if grid.min() > 0 or grid.max() < beta_star:
        raise GridCoverageError(f"grid [{grid.min()}, {grid.max()}] does not cover [0, {beta_star}]")


def oracle_alpha(
    family,
    theta,
    beta_star: float,
    shots: int,
    alpha_grid=None,
    n_mc: int = 20_000,
    rng=None,
) -> OracleResult:
    """Grid minimizer of the Monte-Carlo MSE between s-shot and ideal steps."""
    rng = rng if rng is not None else np.random.default_rng()
    grid = default_grid(beta_star) if alpha_grid is None else np.asarray(alpha_grid, float)
    _check_grid(grid, beta_star)
    if shots < 1:
        raise ValueError("oracle needs shots >= 1")
    sample, pop = family.shot_gradients(theta, shots, n_mc, rng)
    mse, sem = _kernels.mse_grid(sample, pop, grid, beta_star)
    i = int(np.argmin(mse))
    return OracleResult(shots, float(grid[i]), grid, mse, sem, i in (0, grid.size - 1))


def decomposition_rows(result: OracleResult, c1: float, c2: float, beta_star: float):
    """Per grid point: sampled MSE, its standard error and the bias-variance prediction."""
    predicted = result.grid**2 * c1 / result.shots + (result.grid - beta_star) ** 2 * c2
    return result.grid, result.mse, result.sem, predicted


# --- variance law ---------------------------------------------------------


@dataclass
class VarianceLawRow:
    shots: int
    variance: float
    ratio: float


def variance_law_check(
    task: TaskSpec,
    params: ParamVector,
    spec: MLPSpec,
    shot_values: Sequence[int],
    n_reps: int,
    rng,
    duplicate: bool = False,
) -> list[VarianceLawRow]:
    """Summed per-coordinate variance of the s-shot mean gradient, for each s.

    ``ratio`` is ``s * Var_s / Var_1``.  With ``duplicate=True`` each s-shot
    batch repeats one draw s times, breaking independence.
    """
    if any(s < 1 for s in shot_values):
        raise ValueError("shot counts must be >= 1")

    def total_variance(s: int) -> float:
        if duplicate:
            batch = draw_points(task, n_reps, rng)
            inputs = np.repeat(batch.inputs, s, axis=0)
            targets = np.repeat(batch.targets, s, axis=0)
        else:
            batch = draw_points(task, n_reps * s, rng)
            inputs, targets = batch.inputs, batch.targets
        n, _, m2 = _kernels.grouped_grad_moments(
            params.flat(), spec.sizes, spec.activation == "relu", inputs, targets, s
        )
        return float(np.sum(m2) / (n - 1))

    base = total_variance(1)
    rows = []
    for s in shot_values:
        var = base if s == 1 else total_variance(s)
        rows.append(VarianceLawRow(s, var, s * var / base))
    return rows


# --- end-to-end estimate --------------------------------------------------


@dataclass
class ScalingRuleEstimate:
    c1: float
    c2: float
    beta_star: float
    n_mc: int
    shots: list[int] = field(default_factory=list)
    alpha_closed: list[float] = field(default_factory=list)
    alpha_oracle: list[float] = field(default_factory=list)
    at_edge: list[bool] = field(default_factory=list)

    @property
    def relative_gaps(self) -> list[float]:
        return [abs(o - c) / c for o, c in zip(self.alpha_oracle, self.alpha_closed)]

    def report(self) -> str:
        lines = ["s\tC1\tC2\tbeta_star\talpha_closed\talpha_oracle\trelative_gap"]
        for s, c, o, gap in zip(self.shots, self.alpha_closed, self.alpha_oracle, self.relative_gaps):
            lines.append(f"{s}\t{self.c1!r}\t{self.c2!r}\t{self.beta_star!r}\t{c!r}\t{o!r}\t{gap!r}")
        return "\n".join(lines) + "\n"


def default_theta(family: LinearGaussianFamily) -> np.ndarray:
    theta = np.zeros(family.dim)
    theta[0] = 1.0
    if family.dim > 1:
        theta[1:] = np.linspace(-0.5, 0.5, family.dim - 1)
    return family.w_mean + theta


def run_scaling_check(
    shots: Sequence[int] = (1, 2, 5, 10),
    n_mc: int = 20_000,
    seed: int = 0,
    family: LinearGaussianFamily | None = None,
    theta=None,
    n_tasks: int = 2_000,
    n_per_task: int = 500,
    grid_points: int = 1001,
) -> ScalingRuleEstimate:
    """Estimate C1/C2, then compare closed-form and grid-search rates per shot count."""
    family = family or LinearGaussianFamily()
    theta = default_theta(family) if theta is None else np.asarray(theta, float)
    rng = np.random.default_rng(seed)
    beta_star = family.beta_star()
    c1, c2 = estimate_c1_c2(family, theta, n_tasks, n_per_task, rng)
    est = ScalingRuleEstimate(c1, c2, beta_star, n_mc)
    grid = default_grid(beta_star, grid_points)
    for s in shots:
        res = oracle_alpha(family, theta, beta_star, s, grid, n_mc, rng)
        est.shots.append(int(s))
        est.alpha_closed.append(closed_form_alpha(c1, c2, beta_star, s))
        est.alpha_oracle.append(res.alpha)
        est.at_edge.append(res.at_edge)
    return est
