"""Timing of the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeats 5]

Both backends are imported from the same process, so the comparison does not
depend on ``VSMETA_DISABLE_NUMBA``.  The first numba call (compilation or
cache load) is excluded from the timings.
"""

import argparse
import time

import numpy as np

from vsmeta import _kernels
from vsmeta.models import MLPSpec, init_params
from vsmeta.tasks import TaskSpec, draw_points
from vsmeta.verification import LinearGaussianFamily, default_grid, default_theta


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    if _kernels.numba_impl is None:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    spec = MLPSpec((1, 40, 40, 1), "relu", "mse")
    flat = init_params(spec, rng).flat()
    batch = draw_points(TaskSpec("sinusoid", {"amplitude": 2.0, "phase": 0.5}, 0), 100_000, rng)
    family = LinearGaussianFamily()
    sample, pop = family.shot_gradients(default_theta(family), 5, 20_000, rng)
    grid = default_grid(1.0)

    cases = {
        "grouped_grad_moments (1e5 rows, 40x40 relu MLP)": lambda impl: _kernels.grouped_grad_moments(
            flat, spec.sizes, True, batch.inputs, batch.targets, 4, impl
        ),
        "mse_grid (2e4 draws, 1001 rates)": lambda impl: _kernels.mse_grid(sample, pop, grid, 1.0, impl),
    }
    print(f"{'kernel':50s} {'numpy [s]':>10s} {'numba [s]':>10s} {'speedup':>8s}")
    for name, call in cases.items():
        call(_kernels.numba_impl)
        t_np = best_of(lambda: call(_kernels.numpy_impl), args.repeats)
        t_nb = best_of(lambda: call(_kernels.numba_impl), args.repeats)
        print(f"{name:50s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
