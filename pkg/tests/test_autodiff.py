import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixfed.autodiff import (DenseLayer, NonFiniteError, Parameter, TapeMismatchError, backward,
                             cross_entropy, finite_diff_grad, forward, max_relative_error, sgd_step)


def layer(w, b, act="identity"):
    return DenseLayer(Parameter(w), Parameter(b), act)


def random_stack(rng, dims, last="identity"):
    layers = [DenseLayer.init(a, b, rng, "relu") for a, b in zip(dims[:-2], dims[1:-1])]
    layers.append(DenseLayer.init(dims[-2], dims[-1], rng, last))
    return layers


# -- forward -----------------------------------------------------------------

def test_forward_identity_layer():
    out, _ = forward([layer(np.eye(2), np.zeros(2))], [[1.0, 2.0]])
    np.testing.assert_array_equal(out, [[1.0, 2.0]])


def test_forward_relu_clamps_negatives():
    out, _ = forward([layer(-np.eye(2), np.zeros(2), "relu")], [[1.0, 2.0]])
    np.testing.assert_array_equal(out, [[0.0, 0.0]])


def test_forward_two_layer_hand_evaluation():
    stack = [layer([[2.0]], [1.0], "relu"), layer([[3.0]], [0.0])]
    out, _ = forward(stack, [[1.0]])
    assert out[0, 0] == 9.0


def test_forward_rows_are_independent():
    rng = np.random.default_rng(0)
    stack = random_stack(rng, [4, 6, 3])
    x = rng.standard_normal((5, 4))
    out, _ = forward(stack, x)
    for i in range(5):
        np.testing.assert_allclose(out[i], forward(stack, x[i:i + 1])[0][0], rtol=1e-14)


def test_forward_errors():
    stack = [layer(np.eye(2), np.zeros(2))]
    with pytest.raises(ValueError):
        forward(stack, [[1.0, 2.0, 3.0]])
    with pytest.raises(NonFiniteError):
        forward(stack, [[np.nan, 1.0]])
    with pytest.raises(ValueError):
        forward([layer(np.ones((3, 2)), np.zeros(3)), layer(np.ones((1, 2)), np.zeros(1))], [[1.0, 1.0]])


def test_dense_layer_rejects_bad_shapes():
    with pytest.raises(ValueError):
        layer(np.eye(2), np.zeros(3))
    with pytest.raises(ValueError):
        layer(np.eye(2), np.zeros(2), "tanh")


# -- cross entropy -------------------------------------------------------------

def test_cross_entropy_uniform_two_class():
    loss, _ = cross_entropy([[0.0, 0.0]], [0])
    assert loss == pytest.approx(0.693147, abs=1e-6)
    assert loss == math.log(2)


def test_cross_entropy_uniform_gives_log_c():
    loss, _ = cross_entropy([[0.0, 0.0, 0.0, 0.0]], [2])
    assert loss == math.log(4)


def test_cross_entropy_confident_logits():
    loss, _ = cross_entropy([[10.0, -10.0]], [0])
    # direct evaluation: -log(e^10 / (e^10 + e^-10)) = log(1 + e^-20)
    assert loss == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-6)
    assert loss == pytest.approx(2.06e-9, rel=1e-2)


def test_cross_entropy_gradient_is_softmax_minus_onehot_over_batch():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    labels = [1, 2]
    _, grad = cross_entropy(logits, labels)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    p[[0, 1], labels] -= 1
    np.testing.assert_allclose(grad, p / 2, rtol=1e-13)


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    logits = Parameter(rng.standard_normal((4, 5)))
    labels = rng.integers(0, 5, size=4)
    _, grad = cross_entropy(logits.value, labels)
    numeric = finite_diff_grad(lambda: cross_entropy(logits.value, labels)[0], [logits], 1e-6)
    assert max_relative_error([grad], numeric) < 1e-6


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        cross_entropy([[0.0, 1.0]], [2])
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((0, 3)), [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.data())
def test_cross_entropy_non_negative(row, data):
    label = data.draw(st.integers(0, len(row) - 1))
    loss, _ = cross_entropy([row], [label])
    assert loss >= 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 50), st.floats(-100, 100))
def test_cross_entropy_uniform_logits_exact(c, value):
    loss, _ = cross_entropy([[value] * c], [0])
    assert loss == math.log(c)


# -- backward ------------------------------------------------------------------

def test_backward_linear():
    w = layer([[2.0]], [0.0])
    _, tape = forward([w], [[3.0]])
    dx = backward(tape, [[1.0]])
    assert w.weights.grad[0, 0] == 3.0
    assert w.bias.grad[0] == 1.0
    assert dx[0, 0] == 2.0


def test_backward_frozen_parameter_gets_no_gradient():
    rng = np.random.default_rng(1)
    stack = random_stack(rng, [3, 4, 2])
    stack[0].weights.frozen = True
    out, tape = forward(stack, rng.standard_normal((5, 3)))
    backward(tape, np.ones_like(out))
    assert not stack[0].weights.grad.any()
    assert stack[0].bias.grad.any()


def test_backward_accumulates():
    w = layer([[2.0]], [0.0])
    for _ in range(2):
        _, tape = forward([w], [[3.0]])
        backward(tape, [[1.0]])
    assert w.weights.grad[0, 0] == 6.0


def test_backward_tape_mismatch():
    rng = np.random.default_rng(0)
    a, b = random_stack(rng, [2, 2]), random_stack(rng, [2, 2])
    _, tape = forward(a, [[1.0, 1.0]])
    with pytest.raises(TapeMismatchError):
        backward(tape, [[1.0, 1.0]], stack=b)
    with pytest.raises(TapeMismatchError):
        backward(tape, [[1.0, 1.0, 1.0]])


@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences_three_layers(seed):
    rng = np.random.default_rng(seed)
    stack = random_stack(rng, [5, 7, 6, 4])
    x = rng.standard_normal((6, 5))
    y = rng.integers(0, 4, size=6)
    params = [p for lay in stack for p in lay.parameters()]

    def loss_fn():
        return cross_entropy(forward(stack, x)[0], y)[0]

    logits, tape = forward(stack, x)
    _, dl = cross_entropy(logits, y)
    backward(tape, dl)
    numeric = finite_diff_grad(loss_fn, params, 1e-5)
    assert max_relative_error([p.grad for p in params], numeric) < 1e-4


# -- sgd -----------------------------------------------------------------------

def test_sgd_step_arithmetic_and_zeroing():
    p = Parameter([3.0])
    p.grad[:] = 6.0
    sgd_step([p], 0.5)
    assert p.value[0] == 0.0
    assert p.grad[0] == 0.0


def test_sgd_step_frozen_and_zero_lr():
    frozen = Parameter([3.0], frozen=True)
    frozen.grad[:] = 6.0
    live = Parameter([3.0])
    live.grad[:] = 6.0
    before = frozen.value.tobytes()
    sgd_step([frozen], 0.5)
    sgd_step([live], 0.0)
    assert frozen.value.tobytes() == before
    assert live.value[0] == 3.0


def test_sgd_step_rejects_non_finite_grad():
    p = Parameter([1.0])
    p.grad[:] = np.inf
    with pytest.raises(NonFiniteError):
        sgd_step([p], 0.1)


# -- finite differences ---------------------------------------------------------

def test_finite_diff_quadratic():
    w = Parameter([3.0])
    (g,) = finite_diff_grad(lambda: float(w.value[0] ** 2), [w], 1e-5)
    assert g[0] == pytest.approx(6.0, abs=1e-6)
    assert w.value[0] == 3.0


def test_finite_diff_constant():
    w = Parameter([1.0, 2.0])
    (g,) = finite_diff_grad(lambda: 5.0, [w], 1e-4)
    np.testing.assert_array_equal(g, 0.0)


def test_finite_diff_eps_range():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda: 0.0, [Parameter([1.0])], 1e-2)


def test_finite_diff_matches_backward_on_two_layer_net():
    rng = np.random.default_rng(11)
    stack = random_stack(rng, [3, 5, 4])
    x, y = rng.standard_normal((4, 3)), rng.integers(0, 4, size=4)
    params = [p for lay in stack for p in lay.parameters()]
    logits, tape = forward(stack, x)
    backward(tape, cross_entropy(logits, y)[1])
    numeric = finite_diff_grad(lambda: cross_entropy(forward(stack, x)[0], y)[0], params, 1e-5)
    assert max_relative_error([p.grad for p in params], numeric) < 1e-4


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    stack = random_stack(rng, [8, 16, 4])
    x = rng.standard_normal((32, 8))
    assert forward(stack, x)[0].tobytes() == forward(stack, x)[0].tobytes()
