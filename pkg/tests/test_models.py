import numpy as np
import pytest

from vsmeta import autodiff as ad
from vsmeta.models import (
    Batch,
    EmptyBatchError,
    MLPSpec,
    ParamVector,
    accuracy,
    empirical_risk,
    init_params,
    mlp_forward,
)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_param_vector_flat_round_trip(rng):
    spec = MLPSpec.regression()
    p = init_params(spec, rng)
    p.layers[0][1][:] = rng.standard_normal(40)
    q = ParamVector.from_flat(p.sizes, p.flat())
    assert p.total_count == 1 * 40 + 40 + 40 * 40 + 40 + 40 + 1
    assert np.array_equal(q.flat(), p.flat())
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))


def test_param_vector_rejects_broken_chain():
    with pytest.raises(ValueError):
        ParamVector([(np.zeros((2, 3)), np.zeros(3)), (np.zeros((4, 1)), np.zeros(1))])
    with pytest.raises(ValueError):
        ParamVector([(np.zeros((2, 3)), np.zeros(2))])
    with pytest.raises(ValueError):
        ParamVector.from_flat((1, 2), np.zeros(3))


def test_batch_validates_and_allows_empty():
    with pytest.raises(ValueError):
        Batch(np.zeros((3, 1)), np.zeros((2, 1)))
    empty = Batch(np.zeros((0, 1)), np.zeros((0, 1)))
    assert empty.n == 0


def test_empirical_risk_on_empty_batch_is_an_error(rng):
    spec = MLPSpec.regression()
    with pytest.raises(EmptyBatchError):
        empirical_risk(init_params(spec, rng), Batch(np.zeros((0, 1)), np.zeros((0, 1))), spec)


def test_forward_matches_manual_computation(rng):
    spec = MLPSpec((2, 3, 1), "tanh", "mse")
    p = init_params(spec, rng)
    x = rng.standard_normal((5, 2))
    (w0, b0), (w1, b1) = p.layers
    expected = np.tanh(x @ w0 + b0) @ w1 + b1
    assert np.allclose(mlp_forward(p, x, "tanh").value, expected, rtol=0, atol=1e-15)


def test_mse_and_cross_entropy_values(rng):
    spec = MLPSpec((1, 1), "tanh", "mse")
    p = ParamVector([(np.array([[2.0]]), np.array([0.5]))])
    batch = Batch(np.array([[1.0], [2.0]]), np.array([[2.0], [4.0]]))
    # predictions 2.5, 4.5 -> squared errors 0.25, 0.25
    assert empirical_risk(p, batch, spec).item() == pytest.approx(0.25)

    cls = MLPSpec((2, 3), "relu", "softmax-xent")
    q = ParamVector([(np.zeros((2, 3)), np.zeros(3))])
    labels = Batch(np.ones((4, 2)), np.array([0, 1, 2, 1]))
    assert empirical_risk(q, labels, cls).item() == pytest.approx(np.log(3.0))
    assert accuracy(q, labels, cls) == 0.25


def test_risk_gradient_matches_finite_differences(rng):
    for spec in (MLPSpec((1, 8, 8, 1), "tanh", "mse"), MLPSpec((2, 6, 4), "relu", "softmax-xent")):
        p = init_params(spec, rng)
        for w, b in p.layers:
            b[:] = rng.uniform(0.05, 0.2, size=b.shape)
        x = rng.standard_normal((6, spec.sizes[0]))
        y = rng.standard_normal((6, 1)) if spec.loss == "mse" else rng.integers(0, 4, size=6)
        batch = Batch(x, y)

        def fn(flat):
            sizes = spec.sizes
            tensors, pos = [], 0
            for fi, fo in zip(sizes[:-1], sizes[1:]):
                tensors.append(flat[pos : pos + fi * fo].reshape(fi, fo))
                pos += fi * fo
                tensors.append(flat[pos : pos + fo])
                pos += fo
            return empirical_risk(tensors, batch, spec)

        assert ad.finite_diff_check(fn, p.flat()) < 1e-5


def test_glorot_init_bounds(rng):
    spec = MLPSpec.classification(2, 4)
    p = init_params(spec, rng)
    for (w, b), (fi, fo) in zip(p.layers, zip(spec.sizes[:-1], spec.sizes[1:])):
        assert np.abs(w).max() <= np.sqrt(6 / (fi + fo))
        assert not b.any()


def test_spec_validation():
    with pytest.raises(ValueError):
        MLPSpec((1,), "tanh", "mse")
    with pytest.raises(ValueError):
        MLPSpec((1, 2), "sigmoid", "mse")
    with pytest.raises(ValueError):
        mlp_forward(init_params(MLPSpec((2, 1)), np.random.default_rng(0)), np.zeros((3, 3)))
