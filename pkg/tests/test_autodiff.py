"""Gradient correctness of every differentiation-engine op."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentkf import autodiff as ad
from latentkf.autodiff import Param, Value

RNG = np.random.default_rng(1234)
TOL = 1e-4


def check(build, leaves, max_entries=None):
    err = ad.finite_difference_check(build, leaves, eps=1e-5, max_entries=max_entries)
    assert err < TOL, f"gradcheck failed: {err}"


def randp(*shape, scale=1.0):
    return Param(RNG.normal(size=shape) * scale)


# ---------------------------------------------------------------------------
# elementwise and broadcasting


def test_grad_add_sub_mul_div():
    a, b = randp(3, 4), randp(3, 4)
    b.data = b.data + 3.0  # keep divisors away from zero
    check(lambda: ad.square(ad.add(a, b)).sum(), [a, b])
    check(lambda: ad.square(ad.sub(a, b)).sum(), [a, b])
    check(lambda: ad.square(ad.mul(a, b)).sum(), [a, b])
    check(lambda: ad.square(ad.div(a, b)).sum(), [a, b])


def test_grad_broadcast_operands():
    a, b = randp(3, 4), randp(4)
    c = randp(3, 1)
    check(lambda: ad.square(a + b).sum(), [a, b])
    check(lambda: ad.square(a * c).sum(), [a, c])
    check(lambda: ad.square(a / (ad.square(b) + 1.0)).sum(), [a, b])


@given(rows=st.integers(1, 4), cols=st.integers(1, 4), collapse=st.booleans())
@settings(max_examples=15, deadline=None)
def test_grad_broadcast_shapes_property(rows, cols, collapse):
    rng = np.random.default_rng(rows * 7 + cols)
    a = Param(rng.normal(size=(rows, cols)))
    b = Param(rng.normal(size=(1, cols) if collapse else (rows, 1)))
    err = ad.finite_difference_check(lambda: ad.square(a * b + b).sum(), [a, b])
    assert err < TOL


def test_grad_unary_ops():
    x = randp(2, 5)
    x.data = np.abs(x.data) + 0.5  # sqrt domain, relu away from kink
    check(lambda: ad.square(ad.relu(x)).sum(), [x])
    check(lambda: ad.square(ad.sigmoid(x)).sum(), [x])
    check(lambda: ad.square(ad.tanh(x)).sum(), [x])
    check(lambda: ad.square(ad.sin(x)).sum(), [x])
    check(lambda: ad.square(ad.exp(x)).sum(), [x])
    check(lambda: ad.square(ad.sqrt(x)).sum(), [x])
    check(lambda: ad.square(ad.square(x)).sum(), [x])


def test_relu_values():
    x = Value(np.array([-2.0, 0.0, 3.0]))
    np.testing.assert_array_equal(ad.relu(x).data, [0.0, 0.0, 3.0])


def test_sigmoid_stable_for_extreme_inputs():
    x = Value(np.array([-500.0, 500.0], dtype=np.float32))
    out = ad.sigmoid(x).data
    np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-12)
    assert np.all(np.isfinite(out))


# ---------------------------------------------------------------------------
# matmul, reductions, shape ops


def test_grad_matmul_2d():
    a, b = randp(3, 4), randp(4, 2)
    check(lambda: ad.square(ad.matmul(a, b)).sum(), [a, b])


def test_grad_matmul_batched():
    a, b = randp(5, 3, 4), randp(5, 4, 2)
    check(lambda: ad.square(ad.matmul(a, b)).sum(), [a, b], max_entries=20)


def test_grad_matmul_broadcast_batch():
    a, b = randp(5, 3, 4), randp(4, 2)
    check(lambda: ad.square(ad.matmul(a, b)).sum(), [a, b], max_entries=20)


def test_matmul_shape_errors_name_both_shapes():
    a, b = Value(np.zeros((3, 4))), Value(np.zeros((3, 4)))
    with pytest.raises(ad.ShapeError) as err:
        ad.matmul(a, b)
    assert "(3, 4)" in str(err.value)
    with pytest.raises(ad.ShapeError):
        ad.matmul(Value(np.zeros(3)), b)


def test_grad_reductions_and_reshape():
    x = randp(3, 4)
    check(lambda: ad.square(x.sum(axis=0)).sum(), [x])
    check(lambda: ad.square(x.sum(axis=1, keepdims=True)).sum(), [x])
    check(lambda: ad.square(x.mean(axis=1)).sum(), [x])
    check(lambda: ad.square(x.mean()), [x])
    check(lambda: ad.square(x.reshape((4, 3))).sum(), [x])
    check(lambda: ad.square(x.reshape((12,))).sum(), [x])


def test_grad_getitem_and_concat():
    x, y = randp(4, 6), randp(4, 2)
    check(lambda: ad.square(x[:, :3]).sum(), [x])
    check(lambda: ad.square(x[1]).sum(), [x])
    check(lambda: ad.square(x[:, [0, 2, 5]]).sum(), [x])
    check(lambda: ad.square(ad.concat([x, y], axis=1)).sum(), [x, y])
    check(lambda: ad.square(ad.concat([x[:, :2], y], axis=0)).sum(), [x, y])


# ---------------------------------------------------------------------------
# convolution


def test_conv2d_output_sides():
    # the 28x28 stride-2 pad-1 ladder: 28 -> 14 -> 7 -> 4
    x = Value(np.zeros((1, 1, 28, 28)))
    w = Value(np.zeros((8, 1, 3, 3)))
    out = ad.conv2d(x, w, stride=2, padding=1)
    assert out.data.shape == (1, 8, 14, 14)
    out2 = ad.conv2d(Value(np.zeros((1, 8, 14, 14))), Value(np.zeros((16, 8, 3, 3))),
                     stride=2, padding=1)
    assert out2.data.shape == (1, 16, 7, 7)
    out3 = ad.conv2d(Value(np.zeros((1, 16, 7, 7))), Value(np.zeros((32, 16, 3, 3))),
                     stride=2, padding=1)
    assert out3.data.shape == (1, 32, 4, 4)


def test_conv2d_matches_direct_convolution():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = ad.conv2d(Value(x), Value(w), Value(b), stride=1, padding=0).data
    # brute-force cross-correlation oracle
    ref = np.zeros((2, 4, 4, 4))
    for n in range(2):
        for f in range(4):
            for i in range(4):
                for j in range(4):
                    ref[n, f, i, j] = np.sum(x[n, :, i:i + 3, j:j + 3] * w[f]) + b[f]
    np.testing.assert_allclose(out, ref, rtol=1e-10)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_grad_conv2d(stride, padding):
    x = randp(2, 2, 6, 6)
    w = randp(3, 2, 3, 3)
    b = randp(3)
    check(lambda: ad.square(ad.conv2d(x, w, b, stride=stride, padding=padding)).sum(),
          [x, w, b], max_entries=30)


def test_conv2d_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.conv2d(Value(np.zeros((1, 2, 8, 8))), Value(np.zeros((4, 3, 3, 3))))


# ---------------------------------------------------------------------------
# graph mechanics


def test_gain_gradient_matches_closed_form():
    # quadratic innovation loss: d/dK |K dz - dx|^2 = 2 (K dz - dx) dz^T
    k = Param(np.array([[2.0]]))
    dz = Value(np.array([[3.0]]))
    dx = Value(np.array([[1.0]]))
    loss = ad.square(ad.matmul(k, dz) - dx).sum()
    ad.backward(loss)
    np.testing.assert_allclose(k.grad, [[30.0]])

    rng = np.random.default_rng(2)
    k = Param(rng.normal(size=(3, 2)))
    dz = Value(rng.normal(size=(2, 1)))
    dx = Value(rng.normal(size=(3, 1)))
    loss = ad.square(ad.matmul(k, dz) - dx).sum()
    ad.backward(loss)
    expected = 2 * (k.data @ dz.data - dx.data) @ dz.data.T
    np.testing.assert_allclose(k.grad, expected, rtol=1e-12)


def test_zero_residual_gives_zero_gradient():
    k = Param(np.array([[1.5]]))
    dz = Value(np.array([[2.0]]))
    dx = Value(np.array([[3.0]]))  # K dz == dx exactly
    loss = ad.square(ad.matmul(k, dz) - dx).sum()
    ad.backward(loss)
    np.testing.assert_allclose(k.grad, [[0.0]])


def test_backward_requires_scalar_and_rejects_double_call():
    x = Param(np.ones((2, 2)))
    y = ad.square(x)
    with pytest.raises(ad.ShapeError):
        ad.backward(y)
    loss = y.sum()
    ad.backward(loss)
    with pytest.raises(ad.DoubleBackwardError):
        ad.backward(loss)


def test_gradients_accumulate_across_shared_nodes():
    x = Param(np.array([2.0]))
    y = x * 3.0
    loss = (y + y).sum()  # dloss/dx = 6
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, [6.0])


def test_constant_subgraphs_are_folded():
    a = Value(np.ones(3))
    b = Value(np.ones(3))
    out = a + b
    assert not out.needs_grad
    assert out._parents == ()


def test_detach_cuts_gradient_flow():
    x = Param(np.array([3.0]))
    y = ad.square(x).detach()
    loss = (y * x).sum()
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, [9.0])  # only the direct factor
