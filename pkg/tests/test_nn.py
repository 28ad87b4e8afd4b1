import math

import numpy as np
import pytest

from varenc.autodiff import Tensor, backward, constant, parameter, zero_grads
from varenc.nn import (
    AdamState,
    ConfigError,
    NonFiniteGradError,
    TrainHyper,
    adam_step,
    cosine_lr,
    cross_entropy,
    cross_entropy_rows,
    init_mlp,
    mlp_forward,
    paper_hyper,
    softmax,
)
from gradcheck import assert_grads_match


def test_init_mlp_deterministic_and_shapes():
    p1 = init_mlp(np.random.default_rng(3), 4, (8,), 3)
    p2 = init_mlp(np.random.default_rng(3), 4, (8,), 3)
    shapes = [w.shape for w, _ in p1.layers]
    assert shapes == [(4, 8), (8, 3)]
    for a, b in zip(p1.parameters(), p2.parameters()):
        assert np.array_equal(a.values, b.values)


def test_init_mlp_fan_in_bound_and_zero_bias():
    p = init_mlp(np.random.default_rng(0), 9, (16, 16), 5)
    for w, b in p.layers:
        bound = 1.0 / math.sqrt(w.shape[0])
        assert np.all(np.abs(w.values) <= bound)
        assert np.all(b.values == 0.0)


def test_init_mlp_rejects_bad_dims():
    with pytest.raises(ConfigError):
        init_mlp(np.random.default_rng(0), 4, (0,), 3)


def test_mlp_forward_zero_weights_and_single_layer():
    p = init_mlp(np.random.default_rng(0), 3, (4,), 2)
    for w, b in p.layers:
        w.values[:] = 0.0
    x = constant(np.random.default_rng(1).normal(size=(5, 3)))
    assert np.all(mlp_forward(p, x).values == 0.0)

    lin = init_mlp(np.random.default_rng(2), 3, (), 2)
    w, b = lin.layers[0]
    b.values[:] = np.array([0.5, -0.5])
    out = mlp_forward(lin, x)
    np.testing.assert_allclose(out.values, x.values @ w.values + b.values)


def test_mlp_forward_shape_error():
    p = init_mlp(np.random.default_rng(0), 3, (4,), 2)
    with pytest.raises(Exception, match="input_dim"):
        mlp_forward(p, constant(np.zeros((2, 7))))


def test_mlp_grad_vs_finite_differences(rng):
    p = init_mlp(np.random.default_rng(11), 4, (6,), 3)
    x = constant(rng.normal(size=(2, 4)))
    w_out = constant(rng.normal(size=(2, 3)))
    assert_grads_match(lambda: (mlp_forward(p, x) * w_out).sum(),
                       p.parameters(), rel_tol=1e-4)


def test_cross_entropy_uniform_and_stability():
    logits = constant(np.zeros(4))
    assert cross_entropy(logits, 1).item() == pytest.approx(math.log(4), abs=1e-12)

    big = constant(np.array([1000.0, 0.0]))
    val = cross_entropy(big, 0).item()
    assert math.isfinite(val) and val == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_grad_is_softmax_minus_onehot(rng):
    logits = parameter(rng.normal(size=(5,)))
    backward(cross_entropy(logits, 2))
    expect = softmax(logits.values).copy()
    expect[2] -= 1.0
    np.testing.assert_allclose(logits.grad, expect, atol=1e-10)

    batch = parameter(rng.normal(size=(4, 6)))
    labels = np.array([0, 3, 5, 1])
    assert_grads_match(lambda: cross_entropy_rows(batch, labels), [batch])


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ConfigError):
        cross_entropy(constant(np.zeros(3)), 3)


def test_cross_entropy_nonnegative(rng):
    for _ in range(50):
        logits = constant(rng.normal(scale=5.0, size=(7,)))
        assert cross_entropy(logits, int(rng.integers(7))).item() >= 0.0


def test_cosine_lr_endpoints_midpoint_monotone():
    assert cosine_lr(0, 100, 1e-3, 1e-5) == pytest.approx(1e-3)
    assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
    assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)
    values = [cosine_lr(s, 200, 1.0, 0.0) for s in range(201)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_adam_zero_grad_identity():
    p = parameter(np.array([1.0, -2.0]))
    state = AdamState([p], weight_decay=0.0)
    before = p.values.copy()
    adam_step(state, [p], [np.zeros(2)], lr_now=0.1)
    assert np.array_equal(p.values, before)


def test_adam_first_step_hand_value():
    p = parameter(np.array([1.0]))
    state = AdamState([p], weight_decay=0.0)
    adam_step(state, [p], [np.array([1.0])], lr_now=0.1)
    # first bias-corrected step moves by ~lr
    assert p.values[0] == pytest.approx(0.9, abs=1e-7)


def test_adam_weight_decay_applies_to_marked_params_only():
    w = parameter(np.array([1.0]))
    b = parameter(np.array([1.0]))
    state = AdamState([w, b], weight_decay=0.01, decay_ids={id(w)})
    adam_step(state, [w, b], [np.zeros(1), np.zeros(1)], lr_now=1.0)
    assert w.values[0] == pytest.approx(0.99)
    assert b.values[0] == pytest.approx(1.0)


def test_adam_rejects_non_finite_grads():
    p = parameter(np.array([1.0]))
    state = AdamState([p])
    with pytest.raises(NonFiniteGradError):
        adam_step(state, [p], [np.array([np.nan])], lr_now=0.1)


def test_adam_deterministic_trajectory():
    def run():
        rng = np.random.default_rng(5)
        p = parameter(rng.normal(size=(3,)))
        state = AdamState([p], weight_decay=1e-2, decay_ids={id(p)})
        for step in range(20):
            g = rng.normal(size=(3,))
            adam_step(state, [p], [g], lr_now=cosine_lr(step, 20, 1e-2, 0.0))
        return p.values.copy()

    assert np.array_equal(run(), run())


def test_hyper_validation_and_preset():
    with pytest.raises(ConfigError):
        TrainHyper(epochs=0)
    with pytest.raises(ConfigError):
        TrainHyper(lr_base=1e-5, lr_min=1e-3)
    h = paper_hyper()
    assert (h.epochs, h.lr_base, h.weight_decay) == (200, 3e-5, 1e-4)
