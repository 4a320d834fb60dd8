import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ontogcn.errors import DimensionError, ProbeError
from ontogcn.numerics import (
    BCE_EPS,
    Identity,
    LeakyReLU,
    Linear,
    Parameter,
    Sigmoid,
    bce_grad,
    bce_loss,
    bce_with_logits,
    bce_with_logits_grad,
    finite_difference_check,
    glorot_uniform,
    leaky_relu,
    matmul,
    numerical_gradient,
    relative_error,
    sgd_step,
    sigmoid,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# ---------------------------------------------------------------- matmul

def test_matmul_hand_product():
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])


def test_matmul_identity_and_zero():
    m = np.random.default_rng(0).standard_normal((3, 3))
    assert np.array_equal(matmul(np.eye(3), m), m)
    assert np.array_equal(matmul(np.zeros((3, 3)), m), np.zeros((3, 3)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"2x3.*2x2"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_matmul_associative_on_random_triples():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b, c = rng.standard_normal((3, 4, 4))
        assert np.allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=0, atol=1e-10)


# ---------------------------------------------------------------- activations

@pytest.mark.parametrize("x, y", [(0.0, 0.0), (-1.0, -0.2), (3.5, 3.5)])
def test_leaky_relu_values(x, y):
    assert leaky_relu(np.array([x]), 0.2)[0] == pytest.approx(y, abs=0)


@pytest.mark.parametrize("slope", [0.0, 1.0, -0.1, 1.5])
def test_leaky_relu_rejects_slope_outside_unit_interval(slope):
    with pytest.raises(ValueError):
        leaky_relu(np.ones(2), slope)


@given(arrays(np.float64, 20, elements=finite))
def test_leaky_relu_monotone(x):
    xs = np.sort(x)
    assert np.all(np.diff(leaky_relu(xs)) >= 0)


def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    big = sigmoid(np.array([40.0, 700.0, 1e6]))
    assert np.all(np.abs(big - 1.0) <= 1e-15)
    with np.errstate(over="raise"):
        sigmoid(np.array([-1e6, 1e6]))


@given(arrays(np.float64, 10, elements=finite))
def test_sigmoid_symmetry_and_range(x):
    s = sigmoid(x)
    assert np.allclose(sigmoid(-x), 1.0 - s, rtol=0, atol=1e-15)
    assert np.all((s > 0) & (s < 1)) or np.any(np.abs(x) > 36)


# ---------------------------------------------------------------- BCE

def test_bce_hand_values():
    assert bce_loss([[0.5]], [[1.0]]) == pytest.approx(math.log(2), rel=1e-15)
    assert bce_loss([[0.9, 0.1]], [[1.0, 0.0]]) == pytest.approx(-math.log(0.9), rel=1e-14)
    assert bce_loss([[0.9, 0.1]], [[1.0, 0.0]]) == pytest.approx(0.10536, abs=1e-5)


def test_bce_perfect_prediction_is_bounded_by_clamp():
    loss = bce_loss([[1.0, 0.0]], [[1.0, 0.0]])
    assert 0.0 <= loss <= -math.log(1 - BCE_EPS) + 1e-15


def test_bce_shape_mismatch():
    with pytest.raises(DimensionError):
        bce_loss(np.ones((2, 2)) / 2, np.ones((2, 3)))


def test_bce_grad_matches_finite_differences():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.05, 0.95, (3, 4))
    t = (rng.random((3, 4)) < 0.5).astype(float)
    err = finite_difference_check(lambda x: (bce_loss(x, t), bce_grad(x, t)), p)
    assert err < 1e-6


def test_bce_with_logits_agrees_with_clamped_form():
    rng = np.random.default_rng(4)
    s = rng.normal(0, 4, (5, 6))
    t = (rng.random((5, 6)) < 0.5).astype(float)
    assert bce_with_logits(s, t) == pytest.approx(bce_loss(sigmoid(s), t), rel=1e-12)
    err = finite_difference_check(lambda x: (bce_with_logits(x, t), bce_with_logits_grad(x, t)), s)
    assert err < 1e-6


def test_bce_with_logits_keeps_gradient_when_saturated():
    g = bce_with_logits_grad([[-80.0]], [[1.0]])
    assert g[0, 0] == pytest.approx(-1.0)
    assert bce_grad(sigmoid(np.array([[-80.0]])), [[1.0]])[0, 0] == 0.0


# ---------------------------------------------------------------- parameters and SGD

def test_sgd_one_step_arithmetic():
    prm = Parameter(np.array([[1.0]]), np.array([[2.0]]))
    sgd_step([prm], 0.1)
    assert prm.value[0, 0] == pytest.approx(0.8)
    assert prm.grad[0, 0] == 0.0


def test_sgd_zero_grad_and_zero_lr_leave_values_bit_identical():
    rng = np.random.default_rng(5)
    a = Parameter(rng.standard_normal((3, 3)))
    b = Parameter(rng.standard_normal((2, 4)), rng.standard_normal((2, 4)))
    before = [a.value.copy(), b.value.copy()]
    sgd_step([a], 0.5)
    sgd_step([b], 0.0)
    assert np.array_equal(a.value, before[0]) and np.array_equal(b.value, before[1])
    assert not b.grad.any()


def test_sgd_rejects_negative_lr():
    with pytest.raises(ValueError):
        sgd_step([Parameter(np.ones((1, 1)))], -1e-3)


def test_parameter_grad_shape_enforced():
    with pytest.raises(DimensionError):
        Parameter(np.ones((2, 2)), np.ones((2, 3)))


def test_glorot_bounds():
    w = glorot_uniform(np.random.default_rng(0), 300, 400)
    bound = math.sqrt(6 / 700)
    assert w.shape == (300, 400)
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.99 * bound


# ---------------------------------------------------------------- layers

def _layer_check(layer, x, seed, readout=None):
    """Relative error of the layer's input gradient under a linear read-out (random by default)."""
    r = readout if readout is not None else np.random.default_rng(seed).standard_normal(x.shape)

    def fb(v):
        y = layer.forward(v)
        return float(np.sum(r * y)), layer.backward(r)

    return finite_difference_check(fb, x)


@pytest.mark.parametrize("seed", range(10))
def test_layer_input_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 5))
    x[np.abs(x) < 1e-3] = 0.1  # keep leaky_relu probes off the kink
    lin = Linear.init(rng, 5, 3)
    lin.bias.value[...] = rng.standard_normal((1, 3))
    r = rng.standard_normal((4, 3))
    assert _layer_check(lin, x, seed, readout=r) < 1e-5
    assert _layer_check(LeakyReLU(0.2), x, seed) < 1e-5
    assert _layer_check(Sigmoid(), x, seed) < 1e-5
    # unit read-out: the only error left is cancellation in f(x+h) - f(x-h)
    assert _layer_check(Identity(), x, seed, readout=np.ones_like(x)) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_linear_weight_and_bias_gradients(seed):
    rng = np.random.default_rng(seed)
    lin = Linear.init(rng, 5, 3)
    x = rng.standard_normal((4, 5))
    t = (rng.random((4, 3)) < 0.5).astype(float)

    def loss():
        return bce_loss(sigmoid(lin.forward(x)), t)

    lin.weight.zero_grad()
    lin.bias.zero_grad()
    y = lin.forward(x)
    lin.backward(bce_with_logits_grad(y, t))
    for prm in (lin.weight, lin.bias):
        assert relative_error(prm.grad, numerical_gradient(loss, prm.value)) < 1e-5


def test_linear_backward_is_x_transpose_dy():
    lin = Linear(Parameter(np.zeros((2, 2))), Parameter(np.zeros((1, 2))))
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    dy = np.array([[1.0, 0.0], [0.0, 1.0]])
    lin.forward(x)
    lin.backward(dy)
    assert np.array_equal(lin.weight.grad, x.T @ dy)
    assert np.array_equal(lin.bias.grad, [[1.0, 1.0]])


def test_backward_without_forward_raises():
    with pytest.raises(RuntimeError):
        Sigmoid().backward(np.ones((1, 1)))
    lin = Linear.init(np.random.default_rng(0), 2, 2)
    lin.forward(np.ones((1, 2)))
    lin.backward(np.ones((1, 2)))
    with pytest.raises(RuntimeError):
        lin.backward(np.ones((1, 2)))


# ---------------------------------------------------------------- finite differences

def test_probe_step_range():
    x = np.zeros((1, 1))
    for h in (0.0, 2e-3, -1e-5):
        with pytest.raises(ValueError):
            numerical_gradient(lambda: 0.0, x, h)


def test_probe_error_on_nonfinite_loss():
    x = np.ones((1, 2))
    with pytest.raises(ProbeError):
        numerical_gradient(lambda: float("nan"), x)


def test_numerical_gradient_restores_input():
    x = np.random.default_rng(0).standard_normal((3, 3))
    before = x.copy()
    numerical_gradient(lambda: float(np.sum(x ** 2)), x)
    assert np.array_equal(x, before)


def test_relative_error_floor():
    assert relative_error(np.array([1e-12]), np.array([0.0])) == pytest.approx(1e-4)
    assert relative_error(np.array([2.0]), np.array([1.0])) == 0.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sigmoid_bce_composite_gradient(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(0, 2, (3, 3))
    t = (rng.random((3, 3)) < 0.5).astype(float)

    def fb(v):
        layer = Sigmoid()
        p = layer.forward(v)
        return bce_loss(p, t), layer.backward(bce_grad(p, t))

    assert finite_difference_check(fb, s) < 1e-5
