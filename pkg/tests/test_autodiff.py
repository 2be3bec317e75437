from __future__ import annotations

import numpy as np
import pytest

from flowseq import autodiff as ad
from flowseq.autodiff import (
    AdamState,
    DimensionMismatch,
    GradTape,
    UnsupportedPrimitive,
    adam_step,
    finite_diff_check,
    grad,
)


def test_quadratic_gradient_analytic():
    # d/dx sum(x^2) = 2x
    theta = np.array([3.0, -1.5, 0.25])
    g = grad(lambda t: ad.vsum(ad.square(t)), theta)
    assert np.allclose(g, 2 * theta)


def test_log_gradient_analytic():
    g = grad(lambda t: ad.vsum(ad.log(t)), np.array([2.0]))
    assert np.allclose(g, [0.5])


def test_chain_and_broadcast():
    tape = GradTape()
    x = tape.input(np.array([1.0, 2.0, 3.0]))
    y = (x * 2.0 + 1.0) * x  # 2x^2 + x
    g = ad.backward(ad.vsum(y), x)
    assert np.allclose(g, 4 * x.value + 1)


def test_gradient_linearity():
    theta = np.array([0.3, 0.7, -0.2])

    def f(t):
        return ad.vsum(ad.exp(t))

    def h(t):
        return ad.vsum(ad.square(t))

    gf = grad(f, theta)
    gh = grad(h, theta)
    gsum = grad(lambda t: f(t) + 3.0 * h(t), theta)
    assert np.allclose(gsum, gf + 3.0 * gh)


def test_softplus_tanh_values_and_grads():
    theta = np.array([-30.0, -1.0, 0.0, 1.0, 30.0])
    tape = GradTape()
    x = tape.input(theta)
    s = ad.softplus(x)
    assert np.allclose(s.value, np.logaddexp(0.0, theta))
    g = ad.backward(ad.vsum(s), x)
    assert np.allclose(g, 1.0 / (1.0 + np.exp(-theta)))
    g2 = grad(lambda t: ad.vsum(ad.tanh(t)), theta)
    assert np.allclose(g2, 1.0 - np.tanh(theta) ** 2)


def test_cumsum_concat_take_reshape_matmul():
    theta = np.arange(1.0, 7.0)

    def f(t):
        a = ad.cumsum(ad.take(t, np.array([0, 1, 2])))
        b = ad.take(t, np.array([3, 4, 5]))
        m = ad.reshape(ad.concat([a, b]), (2, 3))
        prod = m @ ad.reshape(b, (3, 1))
        return ad.vsum(prod)

    rel = finite_diff_check(f, theta)
    assert rel < 1e-6


def test_take_repeated_indices_scatter_adds():
    theta = np.array([2.0, 5.0])
    g = grad(lambda t: ad.vsum(ad.take(t, np.array([0, 0, 1]))), theta)
    assert np.allclose(g, [2.0, 1.0])


def test_log_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=12)
    tape = GradTape()
    x = tape.input(theta)
    rows = ad.log_softmax(ad.reshape(x, (3, 4)))
    p = np.exp(rows.value)
    assert np.allclose(p.sum(axis=1), 1.0)
    # gradient of a single selected logprob: p shifted by the one-hot pick
    picked = ad.take(ad.reshape(rows, (12,)), np.array([1]))
    g = ad.backward(ad.vsum(picked), x)
    want = np.zeros(12)
    want[1] = 1.0
    want[:4] -= p[0]
    assert np.allclose(g[:4], want[:4]) and np.allclose(g[4:], 0.0)


def test_clamp_minimum_gradients():
    theta = np.array([-2.0, 0.5, 3.0])
    g = grad(lambda t: ad.vsum(ad.clamp(t, 0.0, 1.0)), theta)
    assert np.allclose(g, [0.0, 1.0, 0.0])
    a = np.array([1.0, 5.0])
    b = np.array([2.0, 2.0])

    def f(t):
        return ad.vsum(ad.minimum(ad.take(t, np.array([0, 1])), ad.take(t, np.array([2, 3]))))

    g2 = grad(f, np.concatenate([a, b]))
    assert np.allclose(g2, [1.0, 0.0, 0.0, 1.0])


def test_finite_diff_on_composite_losses():
    rng = np.random.default_rng(7)
    for _ in range(5):
        theta = rng.normal(size=10)

        def f(t):
            q = ad.log_softmax(ad.reshape(t, (2, 5)))
            picked = ad.take(ad.reshape(q, (10,)), np.array([2, 7]))
            return ad.vsum(ad.square(ad.cumsum(picked))) + ad.vsum(ad.exp(picked))

        assert finite_diff_check(f, theta) < 1e-6


def test_unsupported_primitives_raise():
    tape = GradTape()
    x = tape.input(np.array([1.0]))
    with pytest.raises(UnsupportedPrimitive):
        np.sin(x)
    with pytest.raises(UnsupportedPrimitive):
        x ** 2


def test_backward_requires_scalar():
    tape = GradTape()
    x = tape.input(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        ad.backward(x * 2.0, x)


def test_unused_leaf_gets_zero_gradient():
    tape = GradTape()
    x = tape.input(np.array([1.0, 2.0]))
    y = tape.input(np.array([3.0]))
    g = ad.backward(ad.vsum(ad.square(y)), x)
    assert np.allclose(g, 0.0)


def test_adam_first_step_magnitude():
    # with bias correction the first step moves by lr in the gradient's sign
    state = AdamState.init(3, lr=0.1)
    theta = np.zeros(3)
    g = np.array([1.0, -2.0, 0.5])
    new_theta, new_state = adam_step(state, theta, g)
    assert np.allclose(new_theta, -0.1 * np.sign(g), atol=1e-6)
    assert new_state.t == 1
    # functional update leaves the old state untouched
    assert state.t == 0 and np.all(state.m == 0)


def test_adam_converges_on_quadratic():
    state = AdamState.init(2, lr=0.05)
    theta = np.array([4.0, -3.0])
    for _ in range(600):
        g = 2 * theta
        theta, state = adam_step(state, theta, g)
    assert np.linalg.norm(theta) < 1e-2


def test_adam_dimension_mismatch():
    state = AdamState.init(3, lr=0.1)
    with pytest.raises(DimensionMismatch):
        adam_step(state, np.zeros(4), np.zeros(4))


def test_adam_resized_preserves_moments():
    state = AdamState.init(2, lr=0.1)
    theta = np.array([1.0, 1.0])
    theta, state = adam_step(state, theta, np.array([0.5, -0.5]))
    grown = state.resized(4)
    assert grown.m.size == 4 and grown.v.size == 4
    assert np.allclose(grown.m[:2], state.m) and np.allclose(grown.m[2:], 0.0)
    assert grown.t == state.t
