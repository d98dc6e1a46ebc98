"""Autodiff engine: op-level gradients against finite differences, tape
semantics, broadcasting, and the reduction/shape primitives."""

import numpy as np
import pytest

import flowkan.diffcore as dc
from flowkan.diffcore import DiffTensor


def leaf(rng, shape, scale=1.0):
    return DiffTensor(scale * rng.standard_normal(shape), requires_grad=True,
                      dtype=np.float64)


def check(build_loss, tensors, tol=1e-6):
    assert dc.gradcheck(build_loss, tensors) < tol


def test_add_mul_broadcast_gradients():
    rng = np.random.default_rng(0)
    a = leaf(rng, (3, 4))
    b = leaf(rng, (4,))
    check(lambda: dc.sum_((a + b) * b), [a, b])


def test_div_and_neg_gradients():
    rng = np.random.default_rng(1)
    a = leaf(rng, (5,))
    b = DiffTensor(rng.uniform(0.5, 2.0, 5), requires_grad=True)
    check(lambda: dc.sum_(-a / b), [a, b])


@pytest.mark.parametrize("op", [dc.exp, dc.sqrt, dc.log, dc.sigmoid, dc.silu,
                                dc.softplus])
def test_unary_gradients(op):
    rng = np.random.default_rng(2)
    x = DiffTensor(rng.uniform(0.3, 1.5, (2, 3)), requires_grad=True)
    check(lambda: dc.sum_(op(x) * op(x)), [x])


def test_relu_and_relu_squared():
    x = DiffTensor(np.array([-2.0, -0.5, 0.5, 2.0]), requires_grad=True)
    check(lambda: dc.sum_(dc.relu(x) * 3.0), [x])
    y = DiffTensor(np.array([-2.0, -0.5, 0.5, 2.0]), requires_grad=True)
    check(lambda: dc.sum_(dc.relu_squared(y)), [y])


def test_clamp_passes_gradient_only_inside():
    x = DiffTensor(np.array([-3.0, 0.0, 3.0]), requires_grad=True)
    with dc.Tape():
        y = dc.sum_(dc.clamp(x, -1.0, 1.0) * np.array([1.0, 2.0, 4.0]))
        dc.backward(y)
    assert np.allclose(x.grad, [0.0, 2.0, 0.0])


def test_maximum_gradient_splits_ties():
    a = DiffTensor(np.array([1.0, 2.0]), requires_grad=True)
    b = DiffTensor(np.array([1.0, 0.0]), requires_grad=True)
    with dc.Tape():
        dc.backward(dc.sum_(dc.maximum(a, b)))
    assert np.allclose(a.grad + b.grad, [1.0, 1.0])
    assert a.grad[1] == 1.0 and b.grad[1] == 0.0


def test_matmul_linear_gradients():
    rng = np.random.default_rng(3)
    x = leaf(rng, (4, 3))
    w = leaf(rng, (3, 2))
    b = leaf(rng, (2,))
    check(lambda: dc.sum_(dc.linear(x, w, b) * dc.linear(x, w, b)), [x, w, b])


def test_matmul_rejects_mismatched_shapes():
    a = DiffTensor(np.zeros((2, 3)))
    b = DiffTensor(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        dc.matmul(a, b)


def test_layer_norm_statistics_and_gradient():
    rng = np.random.default_rng(4)
    x = leaf(rng, (3, 8), scale=2.0)
    g = DiffTensor(np.ones(8), requires_grad=True)
    b = DiffTensor(np.zeros(8), requires_grad=True)
    with dc.no_grad():
        y = dc.layer_norm(x, g, b).data
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(y.var(axis=-1), 1.0, atol=1e-4)
    check(lambda: dc.sum_(dc.layer_norm(x, g, b) * rng_weights), [x, g, b])


rng_weights = np.random.default_rng(5).standard_normal((3, 8))


def test_shape_ops_gradients():
    rng = np.random.default_rng(6)
    x = leaf(rng, (2, 3, 4))
    w = rng.standard_normal((2, 4, 4))

    def loss():
        y = dc.concat([dc.narrow(x, 1, 0, 2), dc.narrow(x, 1, 1, 2)], axis=1)
        y = dc.flip(y, 1)
        y = dc.reshape(y, (2, 4, 4))
        return dc.sum_(y * w)

    check(loss, [x])


def test_reduce_max_gradient():
    x = DiffTensor(np.array([[1.0, 3.0, 3.0], [2.0, 0.0, 1.0]]),
                   requires_grad=True)
    with dc.Tape():
        dc.backward(dc.sum_(dc.reduce_max(x, axis=1)))
    # ties split evenly, singleton max takes the full gradient
    assert np.allclose(x.grad, [[0.0, 0.5, 0.5], [1.0, 0.0, 0.0]])


def test_mean_and_sum_axis():
    rng = np.random.default_rng(7)
    x = leaf(rng, (3, 5))
    check(lambda: dc.sum_(dc.mean_(x, axis=1) * np.arange(3.0)), [x])


def test_tape_accumulates_into_reused_leaf():
    x = DiffTensor(np.array(2.0), requires_grad=True)
    with dc.Tape():
        dc.backward(x * x + 3.0 * x)
    assert np.allclose(x.grad, 2 * 2.0 + 3.0)


def test_no_grad_blocks_recording():
    x = DiffTensor(np.ones(3), requires_grad=True)
    with dc.Tape() as tape:
        with dc.no_grad():
            y = x * 2.0
        assert y._tape is None
    assert tape is not None


def test_backward_outside_tape_raises():
    x = DiffTensor(np.ones(2), requires_grad=True)
    y = x * 2.0  # no tape active
    with pytest.raises(ValueError):
        dc.backward(dc.sum_(y))


def test_numpy_left_operand_dispatches_to_tensor():
    # without __array_ufunc__ = None, ndarray * DiffTensor would be mangled
    # into an object array instead of calling the reflected operator
    x = DiffTensor(np.full(3, 2.0), requires_grad=True)
    y = np.full(3, 4.0) * x
    assert isinstance(y, DiffTensor)
    assert np.allclose(y.data, 8.0)


def test_dtype_default_and_override():
    t32 = DiffTensor(np.zeros(2, np.float64))
    assert t32.dtype == np.float64
    t = DiffTensor([1, 2], dtype=np.float32)
    assert t.dtype == np.float32


def test_finite_difference_handles_noncontiguous_tensor():
    w = DiffTensor(np.asarray(np.arange(6.0).reshape(2, 3).T), requires_grad=True)
    w.data = np.arange(6.0).reshape(2, 3).T  # transposed view, non-contiguous
    assert not w.data.flags["C_CONTIGUOUS"]
    coeff = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    (g,) = dc.finite_difference_gradients(
        lambda: float((w.data * coeff).sum()), [w])
    assert np.allclose(g, coeff)
