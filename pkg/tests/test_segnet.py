import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedema.errors import ConfigError, DimensionError, InvalidLabelError
from fedema.numerics import EPS_CLAMP, finite_diff_gradient, max_relative_error
from fedema.segnet import (
    Batch,
    ModelConfig,
    backward,
    cross_entropy,
    forward,
    init_params,
    negative_entropy,
    objective,
)

from conftest import random_batch, random_params


def test_param_count():
    cfg = ModelConfig(feature_dim=3, hidden_dim=4, class_count=3)
    assert cfg.param_count == 3 * 4 + 4 + 4 * 3 + 3
    with pytest.raises(ConfigError):
        ModelConfig(class_count=1)
    with pytest.raises(ConfigError):
        ModelConfig(hidden_dim=0)


def test_init_is_glorot_bounded_and_seeded():
    cfg = ModelConfig(feature_dim=3, hidden_dim=8, class_count=6, seed=5)
    a, b = init_params(cfg), init_params(cfg)
    assert a.tobytes() == b.tobytes()
    w1 = a[: 3 * 8]
    assert np.all(np.abs(w1) <= math.sqrt(6 / (3 + 8)))
    assert not np.array_equal(a, init_params(cfg, seed=6))


def test_zero_params_give_uniform(small_cfg):
    rng = np.random.default_rng(0)
    batch = random_batch(rng, small_cfg)
    probs = forward(np.zeros(small_cfg.param_count), batch, small_cfg)
    np.testing.assert_array_equal(probs, 1.0 / 3.0)


def test_forward_deterministic(small_model):
    cfg, params, batch = small_model
    assert forward(params, batch, cfg).tobytes() == forward(params, batch, cfg).tobytes()


def test_forward_matches_handwritten_script():
    # independent scalar-loop forward pass for one pixel
    cfg = ModelConfig(feature_dim=3, hidden_dim=4, class_count=3)
    rng = np.random.default_rng(11)
    params = rng.normal(size=cfg.param_count)
    x = [0.3, -1.2, 2.0]
    w1 = [[params[f * 4 + j] for j in range(4)] for f in range(3)]
    b1 = [params[12 + j] for j in range(4)]
    w2 = [[params[16 + j * 3 + k] for k in range(3)] for j in range(4)]
    b2 = [params[28 + k] for k in range(3)]
    hidden = [math.tanh(sum(x[f] * w1[f][j] for f in range(3)) + b1[j]) for j in range(4)]
    logits = [sum(hidden[j] * w2[j][k] for j in range(4)) + b2[k] for k in range(3)]
    exps = [math.exp(z) for z in logits]
    expected = [e / sum(exps) for e in exps]
    got = forward(params, Batch(np.array([x]), np.array([0])), cfg)[0]
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_forward_dimension_errors(small_cfg):
    batch = Batch(np.zeros((2, 3)), np.array([0, 1]))
    with pytest.raises(DimensionError):
        forward(np.zeros(small_cfg.param_count + 1), batch, small_cfg)
    with pytest.raises(DimensionError):
        forward(np.zeros(small_cfg.param_count), Batch(np.zeros((2, 2)), np.array([0, 1])), small_cfg)
    with pytest.raises(InvalidLabelError):
        forward(np.zeros(small_cfg.param_count), Batch(np.zeros((1, 3)), np.array([3])), small_cfg)


def test_cross_entropy_examples():
    assert cross_entropy(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1]) == 0.0
    assert cross_entropy(np.full((5, 4), 0.25), [0, 1, 2, 3, 0]) == pytest.approx(1.386294, abs=1e-6)
    assert cross_entropy(np.array([[0.7, 0.3]]), [0]) == pytest.approx(-math.log(0.7))
    assert cross_entropy(np.array([[0.7, 0.3]]), [0]) == pytest.approx(0.356675, abs=1e-6)


def test_negative_entropy_examples():
    assert negative_entropy(np.full((3, 4), 0.25)) == pytest.approx(-1.386294, abs=1e-6)
    assert negative_entropy(np.array([[0.5, 0.5]])) == pytest.approx(-0.693147, abs=1e-6)
    near_one_hot = np.array([[1.0 - 2 * EPS_CLAMP, EPS_CLAMP, EPS_CLAMP]])
    assert abs(negative_entropy(near_one_hot)) <= 1e-9


prob_rows = st.integers(2, 7).flatmap(
    lambda k: st.lists(
        st.lists(st.floats(0.0, 1.0), min_size=k, max_size=k).filter(lambda r: sum(r) > 1e-3),
        min_size=1,
        max_size=6,
    )
)


@given(prob_rows)
@settings(max_examples=150, deadline=None)
def test_negative_entropy_bounds(rows):
    p = np.array(rows, dtype=np.float64)
    p /= p.sum(axis=1, keepdims=True)
    k = p.shape[1]
    h = negative_entropy(p)
    assert -math.log(k) - 1e-12 <= h <= 0.0


@given(prob_rows, st.data())
@settings(max_examples=100, deadline=None)
def test_cross_entropy_nonnegative(rows, data):
    p = np.array(rows, dtype=np.float64)
    p /= p.sum(axis=1, keepdims=True)
    labels = data.draw(st.lists(st.integers(0, p.shape[1] - 1), min_size=len(p), max_size=len(p)))
    assert cross_entropy(p, labels) >= 0.0


def test_objective_examples(small_model):
    cfg, params, batch = small_model
    probs = forward(params, batch, cfg)
    ce = cross_entropy(probs, batch.labels)
    assert objective(params, batch, cfg, 0.0) == ce
    plus = objective(params, batch, cfg, 0.01, +1)
    minus = objective(params, batch, cfg, 0.01, -1)
    assert minus - plus == pytest.approx(-2 * 0.01 * negative_entropy(probs), rel=1e-12)
    assert plus <= ce <= minus
    with pytest.raises(ConfigError):
        objective(params, batch, cfg, -0.1)


def test_objective_uniform_k4():
    cfg = ModelConfig(feature_dim=2, hidden_dim=3, class_count=4)
    batch = Batch(np.ones((4, 2)), np.array([0, 1, 2, 3]))
    value = objective(np.zeros(cfg.param_count), batch, cfg, 0.002, +1)
    # ln 4 + 0.002 * (-ln 4)
    assert value == pytest.approx(1.383521, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("lam", [0.0, 0.002, 0.01])
@pytest.mark.parametrize("sign", [1, -1])
def test_backward_matches_finite_differences(seed, lam, sign, small_cfg):
    rng = np.random.default_rng(seed)
    params = random_params(rng, small_cfg)
    batch = random_batch(rng, small_cfg)
    analytic = backward(params, batch, small_cfg, lam, sign)
    numeric = finite_diff_gradient(lambda w: objective(w, batch, small_cfg, lam, sign), params, h=1e-5)
    assert max_relative_error(analytic, numeric) <= 1e-4


def test_backward_large_regulariser_matches_fd(small_cfg):
    # makes the entropy term dominate so its gradient is actually exercised
    rng = np.random.default_rng(9)
    params = random_params(rng, small_cfg)
    batch = random_batch(rng, small_cfg)
    for sign in (1, -1):
        analytic = backward(params, batch, small_cfg, 5.0, sign)
        numeric = finite_diff_gradient(lambda w: objective(w, batch, small_cfg, 5.0, sign), params)
        assert max_relative_error(analytic, numeric) <= 1e-4


@given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 0.002, 0.01, 0.5]), st.sampled_from([1, -1]))
@settings(max_examples=30, deadline=None)
def test_backward_property(seed, lam, sign):
    cfg = ModelConfig(feature_dim=2, hidden_dim=3, class_count=4)
    rng = np.random.default_rng(seed)
    params = random_params(rng, cfg)
    batch = random_batch(rng, cfg, pixels=int(rng.integers(1, 10)))
    analytic = backward(params, batch, cfg, lam, sign)
    numeric = finite_diff_gradient(lambda w: objective(w, batch, cfg, lam, sign), params, h=1e-5)
    assert max_relative_error(analytic, numeric) <= 1e-4


def test_lambda_zero_gradient_is_ce_gradient(small_model):
    cfg, params, batch = small_model
    np.testing.assert_array_equal(backward(params, batch, cfg, 0.0, 1), backward(params, batch, cfg, 0.0, -1))


def test_duplicated_batch_same_gradient(small_model):
    cfg, params, batch = small_model
    doubled = Batch(np.vstack([batch.features, batch.features]), np.concatenate([batch.labels, batch.labels]))
    np.testing.assert_allclose(
        backward(params, doubled, cfg, 0.01), backward(params, batch, cfg, 0.01), rtol=1e-12, atol=1e-15
    )
