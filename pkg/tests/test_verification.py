import numpy as np
import pytest

from vsmeta.models import Batch, MLPSpec, init_params
from vsmeta.tasks import TaskSpec
from vsmeta.verification import (
    FixedDataFamily,
    GridCoverageError,
    LinearGaussianFamily,
    closed_form_alpha,
    decomposition_rows,
    default_grid,
    default_theta,
    estimate_c1_c2,
    estimate_c1_c2_mlp,
    oracle_alpha,
    run_scaling_check,
    variance_law_check,
)

FAMILY = LinearGaussianFamily()
THETA = default_theta(FAMILY)
SPEC = MLPSpec((1, 10, 1), "tanh", "mse")
TASK = TaskSpec("sinusoid", {"amplitude": 2.0, "phase": 0.3}, 5)


def test_exact_constants_of_the_default_family():
    c1, c2 = FAMILY.exact_c1_c2(THETA)
    # ||theta||^2 = 1.5, plus task variance 3 * 0.25
    assert c2 == pytest.approx(2.25)
    assert c1 == pytest.approx(4 * 2.25 + 0.25 * 3)
    assert FAMILY.beta_star() == 1.0


def test_estimated_constants_match_exact_values():
    c1, c2 = estimate_c1_c2(FAMILY, THETA, 2000, 500, np.random.default_rng(0))
    e1, e2 = FAMILY.exact_c1_c2(THETA)
    assert c1 == pytest.approx(e1, rel=0.03)
    # the plain squared mean is biased up by C1 / n_per_task
    assert c2 == pytest.approx(e2 + e1 / 500, rel=0.03)


def test_single_datapoint_has_no_variance():
    params = init_params(SPEC, np.random.default_rng(0))
    fam = FixedDataFamily(Batch(np.array([[0.5]]), np.array([[1.0]])), SPEC, params)
    c1, c2 = estimate_c1_c2(fam, None, 3, 10, np.random.default_rng(0))
    assert c1 == 0.0 and c2 > 0
    assert closed_form_alpha(c1, c2, 1.0, 5) == 1.0
    res = oracle_alpha(fam, None, 1.0, 3, n_mc=100, rng=np.random.default_rng(0))
    assert res.alpha == 1.0 and res.at_edge


def test_zero_signal_gives_zero_rate():
    fam = LinearGaussianFamily(task_std=0.0)
    c1, c2 = fam.exact_c1_c2(fam.w_mean)
    assert c2 == 0.0 and c1 == pytest.approx(0.75)
    assert closed_form_alpha(c1, c2, 1.0, 10) == 0.0


def test_closed_form_examples():
    assert closed_form_alpha(9.75, 2.25, 1.0, 0) == 0.0
    assert closed_form_alpha(1.0, 1.0, 2.0, 1) == pytest.approx(1.0)
    assert closed_form_alpha(9.75, 2.25, 1.0, 10) == pytest.approx(1 - 1 / (1 + 22.5 / 9.75))


def test_large_shot_oracle_approaches_beta_star():
    res = oracle_alpha(FAMILY, THETA, 1.0, 10_000, n_mc=20_000, rng=np.random.default_rng(1))
    c1, c2 = FAMILY.exact_c1_c2(THETA)
    assert res.alpha == pytest.approx(closed_form_alpha(c1, c2, 1.0, 10_000), rel=0.02)


def test_wishart_path_matches_explicit_sampling():
    rng = np.random.default_rng(2)
    wish, pop = FAMILY.shot_gradients(THETA, 300, 4000, rng)
    _, c2 = FAMILY.exact_c1_c2(THETA)
    c1, _ = FAMILY.exact_c1_c2(THETA)
    err = ((wish - pop) ** 2).sum(axis=1).mean()
    assert err == pytest.approx(c1 / 300, rel=0.1)
    assert np.allclose(wish.mean(axis=0), THETA - FAMILY.w_mean, atol=0.05)


def test_grid_must_cover_the_range():
    with pytest.raises(GridCoverageError):
        oracle_alpha(FAMILY, THETA, 1.0, 2, alpha_grid=np.linspace(0, 0.5, 500), n_mc=10)
    with pytest.raises(GridCoverageError):
        oracle_alpha(FAMILY, THETA, 1.0, 2, alpha_grid=np.linspace(0, 1, 50), n_mc=10)
    with pytest.raises(ValueError):
        oracle_alpha(FAMILY, THETA, 1.0, 0, n_mc=10)


def test_oracle_is_monotone_in_shots_with_a_clear_minimum():
    alphas = []
    for s in (1, 2, 3, 5, 8, 10):
        res = oracle_alpha(FAMILY, THETA, 1.0, s, n_mc=20_000, rng=np.random.default_rng(s))
        assert res.curvature() > 0 and not res.at_edge
        alphas.append(res.alpha)
    assert all(b > a for a, b in zip(alphas, alphas[1:]))


def test_decomposition_matches_sampled_mse():
    res = oracle_alpha(FAMILY, THETA, 1.0, 4, default_grid(1.0, 201), 50_000, np.random.default_rng(3))
    grid, mse, sem, predicted = decomposition_rows(res, *FAMILY.exact_c1_c2(THETA), 1.0)
    assert np.all(np.abs(mse - predicted) <= 4 * sem + 1e-12)


def test_variance_law_ratios():
    params = init_params(SPEC, np.random.default_rng(0))
    rows = variance_law_check(TASK, params, SPEC, (1, 4), 20_000, np.random.default_rng(0))
    assert rows[0].ratio == 1.0
    assert 0.95 <= rows[1].ratio <= 1.05
    dup = variance_law_check(TASK, params, SPEC, (1, 4), 20_000, np.random.default_rng(0), duplicate=True)
    assert dup[1].ratio == pytest.approx(4.0, rel=0.05)
    with pytest.raises(ValueError):
        variance_law_check(TASK, params, SPEC, (0,), 10, np.random.default_rng(0))


def test_mlp_constants_are_consistent_with_variance_law():
    params = init_params(SPEC, np.random.default_rng(0))
    c1, _ = estimate_c1_c2_mlp([TASK], params, SPEC, 20_000, np.random.default_rng(4))
    rows = variance_law_check(TASK, params, SPEC, (1,), 20_000, np.random.default_rng(5))
    assert c1 == pytest.approx(rows[0].variance, rel=0.05)


def test_scaling_check_report():
    est = run_scaling_check(shots=(1, 5), n_mc=5000, n_tasks=200, n_per_task=200, grid_points=201)
    lines = est.report().splitlines()
    assert lines[0].split("\t") == ["s", "C1", "C2", "beta_star", "alpha_closed", "alpha_oracle", "relative_gap"]
    assert [line.split("\t")[0] for line in lines[1:]] == ["1", "5"]
    assert est.alpha_closed[0] < est.alpha_closed[1]
