import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vsmeta import autodiff as ad
from vsmeta.autodiff import Tensor
from vsmeta.learners import (
    Adam,
    Episode,
    FixedRate,
    MetaLearner,
    MetaOptimizerConfig,
    PerParameterRate,
    PerShotRate,
    ScaledLearningRate,
    ScaledRate,
    clip_by_global_norm,
    draw_episode,
    inner_update,
    inverse_softplus,
    load_checkpoint,
    make_policy,
    meta_objective_vs,
    naive_objective,
    save_checkpoint,
    scaled_lr,
    scaled_rate,
    softplus,
)
from vsmeta.models import Batch, MLPSpec, ParamVector, empirical_risk, init_params
from vsmeta.tasks import TaskDistribution, sample_batch, sample_stream

SMALL = MLPSpec((1, 10, 10, 1), "tanh", "mse")


def sinusoid_episodes(seed, n_tasks=4, max_shots=5, fixed_shots=None):
    rng = np.random.default_rng(seed)
    tasks = sample_stream(TaskDistribution(), n_tasks, seed)
    return [
        draw_episode(sample_batch(t, 15), max_shots, rng, 5, fixed_shots=fixed_shots, task_index=i)
        for i, t in enumerate(tasks)
    ]


# --- scaled rate ----------------------------------------------------------


def test_scaled_lr_examples():
    lr = ScaledLearningRate.from_values(0.1, 1.0)
    assert scaled_lr(lr, 0) == 0.0
    assert scaled_lr(lr, 1) == pytest.approx(0.05, rel=1e-12)
    assert abs(scaled_lr(lr, 10**6) - lr.beta) < 1e-6
    with pytest.raises(ValueError):
        scaled_lr(lr, -1)


def test_softplus_storage_keeps_values_positive():
    for raw in (-50.0, -1.0, 0.0, 3.0, 40.0):
        assert ScaledLearningRate(raw, raw).beta > 0
    assert softplus(inverse_softplus(0.1)) == pytest.approx(0.1, rel=1e-15)
    with pytest.raises(ValueError):
        inverse_softplus(0.0)


def test_shot_awareness_identities_at_unit_eta():
    for beta in (0.1, 0.37, 1.0, 2.5):
        assert scaled_rate(beta, 1.0, 1) == beta / 2
        assert scaled_rate(beta, 1.0, 9) == 0.9 * beta


@settings(max_examples=1000, deadline=None)
@given(
    st.floats(1e-3, 10.0),
    st.floats(1e-3, 10.0),
    st.integers(0, 10_000),
    st.integers(1, 10_000),
)
def test_scaled_rate_strictly_increasing(beta, eta, s, gap):
    assert scaled_rate(beta, eta, s) < scaled_rate(beta, eta, s + gap)


# --- policies -------------------------------------------------------------


def test_policy_shapes_and_rates():
    params = init_params(SMALL, np.random.default_rng(0))
    cfg = MetaOptimizerConfig(max_shots=7)
    table = make_policy("per-shot", params, cfg)
    assert len(table.table) == 8
    assert table.rate(3).item() == pytest.approx(0.1)
    with pytest.raises(ValueError):
        table.rate(8)
    per = make_policy("per-parameter", params, cfg)
    assert sum(r.size for r in per.rates) == params.total_count
    assert isinstance(make_policy("fixed", params, cfg), FixedRate)
    assert make_policy("scaled", params, cfg).rate(0).item() == 0.0
    with pytest.raises(ValueError):
        make_policy("adagrad", params, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        MetaOptimizerConfig(outer_rate=0.0)
    with pytest.raises(ValueError):
        MetaOptimizerConfig(inner_steps=0)
    with pytest.raises(ValueError):
        MetaOptimizerConfig(max_shots=0)


# --- inner update ---------------------------------------------------------


def test_inner_update_zero_shot_is_bit_identical():
    params = init_params(SMALL, np.random.default_rng(1))
    empty = Batch(np.zeros((0, 1)), np.zeros((0, 1)))
    out = inner_update(params, 0.5, empty, SMALL, n_steps=3)
    assert out.flat().tobytes() == params.flat().tobytes()
    tensors = params.tensors()
    assert inner_update(tensors, 0.5, empty, SMALL) == tensors


def test_inner_update_zero_rate_is_identity():
    params = init_params(SMALL, np.random.default_rng(1))
    batch = sample_batch(sample_stream(TaskDistribution(), 1, 0)[0], 5)
    assert inner_update(params, 0.0, batch, SMALL).flat().tobytes() == params.flat().tobytes()


def test_inner_update_closed_form_gradient_step():
    # h(x) = w*x + b on x=1, y=1 from w=b=0: loss (w+b-1)^2, gradient -2 on each
    spec = MLPSpec((1, 1), "tanh", "mse")
    params = ParamVector([(np.zeros((1, 1)), np.zeros(1))])
    out = inner_update(params, 0.5, Batch(np.ones((1, 1)), np.ones((1, 1))), spec, clip=None)
    assert out.layers[0][0][0, 0] == 1.0 and out.layers[0][1][0] == 1.0


def test_inner_update_clips_by_global_norm():
    spec = MLPSpec((1, 1), "tanh", "mse")
    params = ParamVector([(np.zeros((1, 1)), np.zeros(1))])
    batch = Batch(np.ones((1, 1)), np.full((1, 1), 100.0))
    out = inner_update(params, 1.0, batch, spec, clip=10.0)
    # raw gradient (-200, -200) has norm 200*sqrt(2); clipped to norm 10
    assert np.linalg.norm(out.flat()) == pytest.approx(10.0, rel=1e-12)


def test_inner_update_rejects_non_finite_loss():
    spec = MLPSpec((1, 1), "tanh", "mse")
    params = ParamVector([(np.full((1, 1), 1e200), np.zeros(1))])
    with pytest.raises(ad.NonFiniteError):
        inner_update(params, 0.1, Batch(np.full((1, 1), 1e200), np.ones((1, 1))), spec)


# --- episodes -------------------------------------------------------------


def test_shot_count_is_truncated_to_available_data():
    rng = np.random.default_rng(0)
    data = Batch(np.arange(3.0).reshape(3, 1), np.zeros((3, 1)))
    seen = {draw_episode(data, 20, rng).shots for _ in range(1000)}
    assert seen == {0, 1, 2, 3}


def test_train_and_val_are_disjoint_when_possible():
    rng = np.random.default_rng(1)
    data = Batch(np.arange(12.0).reshape(12, 1), np.zeros((12, 1)))
    for _ in range(200):
        ep = draw_episode(data, 10, rng, val_size=4)
        if ep.shots < 12:
            assert not np.intersect1d(ep.train.inputs, ep.val.inputs).size
        assert ep.train.n == ep.shots and ep.val.n >= 1


def test_empty_data_gives_empty_episode():
    ep = draw_episode(Batch(np.zeros((0, 1)), np.zeros((0, 1))), 5, np.random.default_rng(0))
    assert ep.shots == 0 and ep.train.n == 0 and ep.val.n == 0


# --- objectives and gradients ---------------------------------------------


def _learner(kind, seed=0, **cfg):
    cfg = MetaOptimizerConfig(**{"inner_steps": 1, "max_shots": 5, **cfg})
    params = init_params(SMALL, np.random.default_rng(seed))
    return MetaLearner(SMALL, params, make_policy(kind, params, cfg), cfg)


def test_all_zero_shot_objective_is_mean_zero_shot_risk():
    eps = sinusoid_episodes(0, fixed_shots=0)
    learner = _learner("scaled")
    j, leaves = learner.objective(eps)
    expected = np.mean([empirical_risk(learner.params, e.val, SMALL).item() for e in eps])
    assert j.item() == pytest.approx(expected, rel=1e-14)
    _, grads = learner.gradients(eps)
    assert not grads["policy.beta_raw"].any() and not grads["policy.eta_raw"].any()


def test_vanishing_beta_recovers_zero_shot_risk():
    eps = sinusoid_episodes(1, n_tasks=1, fixed_shots=4)
    learner = _learner("scaled")
    learner.policy.lr = ScaledLearningRate(-60.0, 0.0)
    j, _ = learner.objective(eps)
    zero = empirical_risk(learner.params, eps[0].val, SMALL).item()
    assert j.item() == pytest.approx(zero, rel=1e-12)


def test_empty_episode_list_is_an_error():
    with pytest.raises(ValueError):
        meta_objective_vs(init_params(SMALL, np.random.default_rng(0)).tensors(), FixedRate(0.1), [], SMALL)


def test_fixed_policy_equals_naive_objective_bitwise():
    eps = sinusoid_episodes(2)
    params = init_params(SMALL, np.random.default_rng(2))
    a = meta_objective_vs(params.tensors(), FixedRate(0.1), eps, SMALL, n_steps=2)
    b = naive_objective(params.tensors(), 0.1, eps, SMALL, n_steps=2)
    assert a.value.tobytes() == b.value.tobytes()


@pytest.mark.parametrize("kind", ["scaled", "per-shot", "per-parameter", "fixed"])
def test_meta_gradients_match_finite_differences(kind):
    # straight-through clipping is not the true derivative, so keep it inactive
    learner = _learner(kind, seed=3, inner_steps=2, inner_clip=1e9)
    eps = sinusoid_episodes(3, n_tasks=2)
    _, grads = learner.gradients(eps)
    names = list(learner.named_arrays())
    base = learner.named_arrays()
    shapes = [base[k].shape for k in names]
    sizes = [base[k].size for k in names]
    flat0 = np.concatenate([base[k].ravel() for k in names])

    def objective(flat):
        pos, named = 0, {}
        for k, shape, n in zip(names, shapes, sizes):
            named[k] = flat[pos : pos + n].value.reshape(shape)
            pos += n
        learner.set_named_arrays(named)
        return learner.objective(eps)[0]

    rng = np.random.default_rng(0)
    probe = rng.choice(flat0.size, size=min(25, flat0.size), replace=False)
    if kind == "scaled":
        probe = np.union1d(probe, [flat0.size - 2, flat0.size - 1])
    analytic = np.concatenate([grads[k].ravel() for k in names])
    h = 1e-6
    for i in probe:
        up, down = flat0.copy(), flat0.copy()
        up[i] += h
        down[i] -= h
        with ad.no_grad():
            fd = (objective(Tensor(up)).item() - objective(Tensor(down)).item()) / (2 * h)
        assert abs(analytic[i] - fd) <= 1e-4 * abs(fd) + 1e-8, (names, i)


def test_first_order_switch_changes_gradients():
    eps = sinusoid_episodes(4, fixed_shots=3)
    full = _learner("scaled", seed=4).gradients(eps)[1]
    approx = _learner("scaled", seed=4, first_order=True).gradients(eps)[1]
    assert max(np.abs(full[k] - approx[k]).max() for k in full) > 0


def test_outer_step_descends_in_most_trials():
    wins = 0
    for seed in range(50):
        learner = _learner("scaled", seed=seed, outer_rate=1e-4)
        eps = sinusoid_episodes(100 + seed, n_tasks=3, fixed_shots=None)
        before, grads = learner.gradients(eps)
        learner.apply(grads)
        after = learner.objective(eps)[0].item()
        wins += after < before
    assert wins >= 45


# --- Adam -----------------------------------------------------------------


def test_adam_zero_gradient_is_a_fixed_point():
    opt = Adam(lr=0.1)
    p = {"w": np.array([1.0, -2.0])}
    assert np.array_equal(opt.step(p, {"w": np.zeros(2)})["w"], p["w"])


def test_adam_first_step_has_magnitude_lr():
    opt = Adam(lr=0.01, clip=None)
    out = opt.step({"w": np.array([0.0, 0.0])}, {"w": np.array([3.0, -0.2])})
    assert np.allclose(out["w"], [-0.01, 0.01], rtol=1e-6)


def test_global_norm_clipping():
    clipped, norm = clip_by_global_norm({"a": np.array([60.0]), "b": np.array([80.0])}, 10.0)
    assert norm == 100.0
    assert np.hypot(clipped["a"][0], clipped["b"][0]) == pytest.approx(10.0)


# --- learner state and checkpoints ----------------------------------------


def test_per_parameter_and_table_policies_round_trip_named_arrays():
    for kind in ("per-parameter", "per-shot", "scaled"):
        learner = _learner(kind)
        named = {k: v + 0.5 for k, v in learner.named_arrays().items()}
        learner.set_named_arrays(named)
        assert all(np.array_equal(learner.named_arrays()[k], named[k]) for k in named)


def test_checkpoint_round_trip(tmp_path):
    learner = _learner("scaled", seed=5)
    learner.apply(learner.gradients(sinusoid_episodes(5))[1])
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, learner)
    other = load_checkpoint(path, _learner("scaled", seed=6))
    for k, v in learner.named_arrays().items():
        assert np.array_equal(other.named_arrays()[k], v)
    assert other.adam.step_count == 1
    assert all(np.array_equal(other.adam.m[k], learner.adam.m[k]) for k in learner.adam.m)
    with pytest.raises(ValueError):
        load_checkpoint(path, _learner("fixed"))


def test_adapt_uses_policy_rate():
    learner = _learner("scaled", seed=7)
    batch = sample_batch(sample_stream(TaskDistribution(), 1, 7)[0], 4)
    rate = learner.policy.rate(4).item()
    expected = inner_update(learner.params, rate, batch, SMALL, 1, 10.0)
    assert np.array_equal(learner.adapt(batch).flat(), expected.flat())
    assert np.array_equal(learner.adapt(batch.take([])).flat(), learner.params.flat())


def test_episode_is_plain_data():
    ep = Episode(0, 0, Batch(np.zeros((0, 1)), np.zeros((0, 1))), Batch(np.zeros((1, 1)), np.zeros((1, 1))))
    assert ep.task_index == 0 and ep.val.n == 1
    assert isinstance(PerShotRate.constant(0.1, 3), PerShotRate)
    assert isinstance(PerParameterRate.like(init_params(SMALL, np.random.default_rng(0)), 0.1), PerParameterRate)
    assert isinstance(ScaledRate(ScaledLearningRate(0.0, 0.0)), ScaledRate)
