import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_model
from fd_oracle import close, smooth_components
from dar_forge.autodiff import (
    Conv2D, Dense, Flatten, Model, finite_diff_gradient, finite_diff_param_gradients, forward,
    loss_and_input_gradient, train_step,
)
from dar_forge.errors import RejectedInputError

LAYER_KINDS = ["conv2d", "conv2d_stride", "dense", "relu", "maxpool2d", "avgpool2d", "flatten", "mixed"]


def one_pixel_linear(w=1.0):
    model = Model([Flatten(), Dense(1, 2)], (1, 1, 1), 2)
    model.layers[1].weight[...] = [[w, 0.0]]
    return model


def test_zero_logits_give_uniform():
    model = Model([Flatten(), Dense(16, 10)], (1, 4, 4), 10)
    probs = forward(model, np.full((1, 4, 4), 0.3, dtype=np.float32))
    np.testing.assert_allclose(probs, 0.1, atol=1e-7)


def test_identity_conv_passes_input_through():
    conv = Conv2D(1, 1, 1)
    conv.weight[...] = 1.0
    x = np.random.default_rng(0).random((1, 1, 5, 5), dtype=np.float32)
    out, _ = conv.forward(x)
    np.testing.assert_array_equal(out, x)


def test_two_class_dense_softmax():
    model = Model([Dense(1, 2)], (1,), 2)
    model.layers[0].weight[...] = [[1.0, -1.0]]
    probs = forward(model, np.array([2.0], dtype=np.float32))
    # logits (2, -2)
    expected = math.exp(2) / (math.exp(2) + math.exp(-2))
    np.testing.assert_allclose(probs, [expected, 1 - expected], rtol=1e-6)


def test_forward_rejects_shape_mismatch():
    model = random_model("dense", 0)
    with pytest.raises(RejectedInputError):
        forward(model, np.zeros((1, 8, 7), dtype=np.float32))


def test_uniform_output_loss_is_log10():
    model = Model([Flatten(), Dense(16, 10)], (1, 4, 4), 10)
    bundle = loss_and_input_gradient(model, np.ones((1, 4, 4), np.float32), 3)
    assert bundle.loss == pytest.approx(math.log(10), abs=1e-9)


def test_zero_weights_give_zero_input_gradient():
    model = random_model("mixed", 0, scale=0.0)
    g = loss_and_input_gradient(model, np.full((1, 8, 8), 0.5, np.float32), 1).grad_input
    assert not g.any()
    assert not finite_diff_gradient(model, np.full((1, 8, 8), 0.5, np.float32), 1).any()


def test_label_out_of_range_rejected():
    model = random_model("dense", 0)
    with pytest.raises(RejectedInputError):
        loss_and_input_gradient(model, np.zeros((1, 8, 8), np.float32), 4)


def test_linear_one_pixel_gradient():
    model = one_pixel_linear()
    x = np.zeros((1, 1, 1), np.float32)
    # d/dx -log sigmoid(x) at 0 = -(1 - 1/2)
    assert finite_diff_gradient(model, x, 0)[0, 0, 0] == pytest.approx(-0.5, abs=1e-7)
    assert loss_and_input_gradient(model, x, 0).grad_input[0, 0, 0] == pytest.approx(-0.5, abs=1e-7)


@pytest.mark.parametrize("kind", LAYER_KINDS)
@pytest.mark.parametrize("seed", range(10))
def test_input_gradient_matches_finite_differences(kind, seed):
    model = random_model(kind, seed)
    rng = np.random.default_rng(100 + seed)
    x = rng.random((1, 8, 8), dtype=np.float32)
    label = int(rng.integers(4))
    analytic = loss_and_input_gradient(model, x, label).grad_input
    oracle = finite_diff_gradient(model, x, label, h=1e-3)
    assert analytic.shape == x.shape
    smooth = smooth_components(model, x, 1e-3)[0]
    assert smooth.mean() >= 0.85
    assert close(analytic, oracle)[smooth].all()


@pytest.mark.parametrize("kind", LAYER_KINDS)
@pytest.mark.parametrize("seed", range(10))
def test_param_gradients_match_finite_differences(kind, seed):
    model = random_model(kind, seed)
    rng = np.random.default_rng(200 + seed)
    x = rng.random((1, 8, 8), dtype=np.float32)
    label = int(rng.integers(4))
    analytic = loss_and_input_gradient(model, x, label).grad_params
    oracle = finite_diff_param_gradients(model, x, label, h=1e-3)
    assert [a.shape for a in analytic] == [p.shape for p in model.params()]
    smooth = smooth_components(model, x, 1e-3, perturb_params=True)
    assert np.concatenate([f.ravel() for f in smooth]).mean() >= 0.85
    for a, o, f in zip(analytic, oracle, smooth):
        assert close(a, o)[f].all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 30.0))
def test_softmax_normalised(seed, scale):
    model = random_model("mixed", seed, scale=scale)
    x = np.random.default_rng(seed).random((1, 8, 8), dtype=np.float32)
    probs = forward(model, x)
    assert abs(float(probs.astype(np.float64).sum()) - 1.0) <= 1e-6
    assert probs.min() >= 0 and probs.max() <= 1
    assert np.isfinite(probs).all()


def test_forward_deterministic():
    model = random_model("mixed", 3)
    x = np.random.default_rng(3).random((1, 8, 8), dtype=np.float32)
    assert forward(model, x).tobytes() == forward(model, x).tobytes()


def test_train_step_zero_lr_keeps_weights():
    model = random_model("mixed", 1)
    before = [p.copy() for p in model.params()]
    batch = np.random.default_rng(1).random((4, 1, 8, 8), dtype=np.float32)
    train_step(model, batch, [0, 1, 2, 3], 0.0)
    for b, a in zip(before, model.params()):
        assert b.tobytes() == a.tobytes()


def test_train_step_single_parameter_update():
    w, x, lr = 0.7, 0.4, 0.1
    model = one_pixel_linear(w)
    # J = -log sigmoid(w x); dJ/dw = -(1 - sigmoid(w x)) x
    g = -(1 - 1 / (1 + math.exp(-w * x))) * x
    train_step(model, np.full((1, 1, 1, 1), x, np.float32), [0], lr)
    assert model.layers[1].weight[0, 0] == pytest.approx(w - lr * g, rel=1e-6)


def test_train_step_reduces_loss_on_separable_pair():
    model = Model([Flatten(), Dense(1, 2)], (1, 1, 1), 2)
    batch = np.array([0.1, 0.9], np.float32).reshape(2, 1, 1, 1)
    labels = [0, 1]
    _, first = train_step(model, batch, labels, 0.5)
    for _ in range(49):
        _, last = train_step(model, batch, labels, 0.5)
    assert last < first


def test_train_step_rejects_mismatched_batch():
    model = random_model("dense", 0)
    with pytest.raises(RejectedInputError):
        train_step(model, np.zeros((2, 1, 8, 8), np.float32), [0], 0.1)
