"""Autodiff primitives: forward values and finite-difference gradients."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uamt import tape
from uamt.rng import RngStream
from uamt.tape import Tensor


def fd_grad(f, x, step=1e-6):
    """Central finite differences of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * step)
    return g


def check_unary(op, x, tol=1e-6):
    t = Tensor(x)
    out = op(t).sum()
    out.backward()
    fd = fd_grad(lambda v: float(op(Tensor(v)).sum().data), np.array(x))
    np.testing.assert_allclose(t.grad, fd, atol=tol, rtol=tol)


# -- forward values -----------------------------------------------------------


def test_arithmetic_values():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
    assert np.array_equal((a + b).data, [4.0, 7.0])
    assert np.array_equal((a - b).data, [-2.0, -3.0])
    assert np.array_equal((a * b).data, [3.0, 10.0])
    assert np.array_equal((-a).data, [-1.0, -2.0])
    assert np.array_equal((a / 2).data, [0.5, 1.0])
    assert np.array_equal((a**2).data, [1.0, 4.0])


def test_division_by_tensor_rejected():
    with pytest.raises(TypeError):
        Tensor([1.0]) / Tensor([2.0])


def test_relu_and_sigmoid_values():
    x = Tensor([-2.0, 0.0, 3.0])
    assert np.array_equal(x.relu().data, [0.0, 0.0, 3.0])
    assert np.allclose(Tensor([0.0]).sigmoid().data, [0.5])
    assert np.allclose(Tensor([math.log(3)]).sigmoid().data, [0.75])


def test_sigmoid_is_stable_at_extremes():
    y = Tensor([-1e4, 1e4]).sigmoid().data
    assert np.all(np.isfinite(y))
    assert np.allclose(y, [0.0, 1.0])


def test_softplus_value_and_stability():
    assert np.allclose(Tensor([0.0]).softplus().data, [math.log(2)])
    big = Tensor([1e4]).softplus().data
    assert np.allclose(big, [1e4])


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        Tensor([1.0, 2.0]).backward()


def test_smooth_l1_elem_values():
    x = Tensor([0.0, 0.5, 1.0, 2.0, -2.0])
    y = tape.smooth_l1_elem(x, beta=1.0).data
    assert np.allclose(y, [0.0, 0.125, 0.5, 1.5, 1.5])


def test_smooth_l1_continuous_at_beta():
    eps = 1e-9
    lo = tape.smooth_l1_elem(Tensor([1.0 - eps]), 1.0).item()
    hi = tape.smooth_l1_elem(Tensor([1.0 + eps]), 1.0).item()
    assert abs(lo - hi) < 1e-8
    assert abs(lo - 0.5) < 1e-8


# -- gradients of elementwise ops ---------------------------------------------


@pytest.mark.parametrize(
    "op",
    [
        lambda t: t.relu(),
        lambda t: t.sigmoid(),
        lambda t: t.softplus(),
        lambda t: t.exp(),
        lambda t: t * t,
        lambda t: t**3,
        lambda t: tape.smooth_l1_elem(t, 1.0),
        lambda t: tape.smooth_l1_elem(t, 0.5),
    ],
)
def test_unary_gradients(op):
    check_unary(op, [-1.7, -0.3, 0.4, 2.2])


def test_log_gradient():
    check_unary(lambda t: t.log(), [0.5, 1.0, 3.0])


def test_broadcast_add_mul_gradients():
    a = Tensor(np.arange(6, dtype=float).reshape(2, 3))
    b = Tensor(np.array([1.0, 2.0, 3.0]))
    out = ((a + b) * b).sum()
    out.backward()
    fd_a = fd_grad(lambda v: float(((Tensor(v) + b) * b).sum().data), a.data.copy())
    fd_b = fd_grad(lambda v: float(((a + Tensor(v)) * Tensor(v)).sum().data), b.data.copy())
    np.testing.assert_allclose(a.grad, fd_a, atol=1e-6)
    np.testing.assert_allclose(b.grad, fd_b, atol=1e-6)


def test_reused_node_accumulates_gradient():
    x = Tensor([2.0])
    out = (x * x + x).sum()  # d/dx = 2x + 1 = 5
    out.backward()
    assert np.allclose(x.grad, [5.0])


def test_mean_and_reshape_gradients():
    x = Tensor(np.arange(6, dtype=float))
    out = x.reshape(2, 3).mean()
    out.backward()
    assert np.allclose(x.grad, np.full(6, 1 / 6))


# -- structured ops -----------------------------------------------------------


def test_dense_forward_example():
    w = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([0.0, 0.0])
    y = tape.dense(Tensor([1.0, 1.0]), w, b)
    assert np.array_equal(y.data, [3.0, 7.0])


def test_dense_identity_and_zero():
    x = Tensor([1.5, -2.0])
    assert np.array_equal(tape.dense(x, Tensor(np.eye(2)), Tensor([0.0, 0.0])).data, x.data)
    assert np.array_equal(
        tape.dense(x, Tensor(np.zeros((2, 2))), Tensor([4.0, 5.0])).data, [4.0, 5.0]
    )


def test_dense_shape_mismatch():
    with pytest.raises(ValueError):
        tape.dense(Tensor([1.0, 2.0, 3.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))


def test_dense_gradients_batched():
    gen = np.random.default_rng(0)
    x = Tensor(gen.normal(size=(3, 4)))
    w = Tensor(gen.normal(size=(2, 4)))
    b = Tensor(gen.normal(size=2))
    (tape.dense(x, w, b) ** 2).sum().backward()

    def loss(xv, wv, bv):
        return float((tape.dense(Tensor(xv), Tensor(wv), Tensor(bv)) ** 2).sum().data)

    np.testing.assert_allclose(
        x.grad, fd_grad(lambda v: loss(v, w.data, b.data), x.data.copy()), atol=1e-5
    )
    np.testing.assert_allclose(
        w.grad, fd_grad(lambda v: loss(x.data, v, b.data), w.data.copy()), atol=1e-5
    )
    np.testing.assert_allclose(
        b.grad, fd_grad(lambda v: loss(x.data, w.data, v), b.data.copy()), atol=1e-5
    )


def test_conv2d_identity_and_zero_kernels():
    x = Tensor(np.arange(16, dtype=float).reshape(1, 4, 4))
    ident = tape.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]), pad=0)
    assert np.array_equal(ident.data, x.data)
    zero = tape.conv2d(x, Tensor(np.zeros((1, 1, 3, 3))), Tensor([0.0]), pad=1)
    assert np.array_equal(zero.data, np.zeros((1, 4, 4)))


def test_conv2d_impulse_response():
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 1.0
    y = tape.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), pad=1)
    expected = np.zeros((1, 5, 5))
    expected[0, 1:4, 1:4] = 1.0
    assert np.array_equal(y.data, expected)


def test_conv2d_rejects_bad_shapes():
    x = Tensor(np.zeros((2, 4, 4)))
    with pytest.raises(ValueError):
        tape.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor([0.0]), pad=1)
    with pytest.raises(ValueError):
        tape.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor([0.0]), pad=0)


def test_conv2d_gradients():
    gen = np.random.default_rng(1)
    x = Tensor(gen.normal(size=(2, 5, 5)))
    w = Tensor(gen.normal(size=(3, 2, 3, 3)))
    b = Tensor(gen.normal(size=3))
    (tape.conv2d(x, w, b, pad=1) ** 2).sum().backward()

    def loss(xv, wv, bv):
        return float((tape.conv2d(Tensor(xv), Tensor(wv), Tensor(bv), pad=1) ** 2).sum().data)

    np.testing.assert_allclose(
        x.grad, fd_grad(lambda v: loss(v, w.data, b.data), x.data.copy()), atol=1e-4
    )
    np.testing.assert_allclose(
        w.grad, fd_grad(lambda v: loss(x.data, v, b.data), w.data.copy()), atol=1e-4
    )
    np.testing.assert_allclose(
        b.grad, fd_grad(lambda v: loss(x.data, w.data, v), b.data.copy()), atol=1e-4
    )


def test_matmul_gradients():
    gen = np.random.default_rng(2)
    a = Tensor(gen.normal(size=(3, 4)))
    b = Tensor(gen.normal(size=(4, 2)))
    ((a @ b) ** 2).sum().backward()

    def loss(av, bv):
        return float(((Tensor(av) @ Tensor(bv)) ** 2).sum().data)

    np.testing.assert_allclose(
        a.grad, fd_grad(lambda v: loss(v, b.data), a.data.copy()), atol=1e-5
    )
    np.testing.assert_allclose(
        b.grad, fd_grad(lambda v: loss(a.data, v), b.data.copy()), atol=1e-5
    )


def test_dropout_masked_forward_and_gradient():
    x = Tensor([1.0, 2.0, 3.0, 4.0])
    mask = np.array([1.0, 0.0, 1.0, 0.0])
    y = tape.dropout_masked(x, mask, keep=0.5)
    assert np.array_equal(y.data, [2.0, 0.0, 6.0, 0.0])
    y.sum().backward()
    assert np.array_equal(x.grad, [2.0, 0.0, 2.0, 0.0])


def test_gather_patches_values_and_gradient():
    x = Tensor(np.arange(2 * 5 * 5, dtype=float).reshape(2, 5, 5))
    rows, cols = np.array([2, 1]), np.array([2, 3])
    y = tape.gather_patches(x, rows, cols, half=1)
    assert y.shape == (2, 18)
    manual = x.data[:, 1:4, 1:4].reshape(2, 9).reshape(-1)
    assert np.array_equal(y.data[0], manual)
    (y**2).sum().backward()
    fd = fd_grad(
        lambda v: float(
            (tape.gather_patches(Tensor(v), rows, cols, 1) ** 2).sum().data
        ),
        x.data.copy(),
    )
    np.testing.assert_allclose(x.grad, fd, atol=1e-5)


def test_gather_patches_overlapping_centers_accumulate():
    x = Tensor(np.ones((1, 4, 4)))
    rows = cols = np.array([1, 1])  # same patch twice
    tape.gather_patches(x, rows, cols, half=1).sum().backward()
    assert np.array_equal(x.grad[0, :3, :3], np.full((3, 3), 2.0))


def test_stack_gradient():
    parts = [Tensor(1.0), Tensor(2.0), Tensor(3.0)]
    out = tape.stack(parts)
    (out * np.array([1.0, 10.0, 100.0])).sum().backward()
    assert [float(p.grad) for p in parts] == [1.0, 10.0, 100.0]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=8))
def test_sigmoid_softplus_identity(values):
    # d/dx softplus(x) = sigmoid(x): the two primitives must agree.
    x = Tensor(values)
    x2 = Tensor(values)
    x.softplus().sum().backward()
    np.testing.assert_allclose(x.grad, x2.sigmoid().data, atol=1e-12)


def test_dropout_replay_through_tape(tmp_path):
    # Frozen mask means two backward passes agree exactly.
    from uamt.nn import dropout_mask

    stream = RngStream(5, 1)
    mask, keep = dropout_mask((8,), 0.5, stream, enabled=True)
    mask2, _ = dropout_mask((8,), 0.5, stream, enabled=True)
    assert np.array_equal(mask, mask2)
    x = Tensor(np.arange(8, dtype=float))
    y = tape.dropout_masked(x, mask, keep)
    y.sum().backward()
    assert np.array_equal(x.grad, mask / keep)
