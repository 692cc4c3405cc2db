"""Minimal reverse-mode autodiff on float64 numpy arrays.

A :class:`Tensor` records the operations that produced it; calling
``backward()`` on a scalar result accumulates gradients into every
reachable leaf.  Only the layer set the detector needs is implemented:
elementwise arithmetic, matmul, same-size 2-D cross-correlation, relu,
sigmoid, softplus, dropout with a frozen mask, patch gathering, and
reductions.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.ndim else float(self.data)

    # -- graph traversal ---------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order, seen = [], set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                n, expanded = stack.pop()
                if expanded:
                    order.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n._parents:
                    stack.append((p, False))

        visit(self)
        for n in order:
            n.grad = np.zeros_like(n.data)
        self.grad = np.ones_like(self.data)
        for n in reversed(order):
            if n._backward is not None:
                n._backward(n)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)

        def bwd(out, a=self, b=other):
            a.grad += _unbroadcast(out.grad, a.shape)
            b.grad += _unbroadcast(out.grad, b.shape)

        return Tensor(self.data + other.data, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(out, a=self):
            a.grad -= out.grad

        return Tensor(-self.data, (self,), bwd)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def bwd(out, a=self, b=other):
            a.grad += _unbroadcast(out.grad * b.data, a.shape)
            b.grad += _unbroadcast(out.grad * a.data, b.shape)

        return Tensor(self.data * other.data, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return self * (1.0 / float(other))

    def __pow__(self, exponent: float):
        e = float(exponent)

        def bwd(out, a=self):
            a.grad += out.grad * e * np.power(a.data, e - 1.0)

        return Tensor(np.power(self.data, e), (self,), bwd)

    def __matmul__(self, other):
        other = as_tensor(other)

        def bwd(out, a=self, b=other):
            g = out.grad
            if a.data.ndim == 2 and b.data.ndim == 1:
                a.grad += np.outer(g, b.data)
                b.grad += a.data.T @ g
            elif a.data.ndim == 2 and b.data.ndim == 2:
                a.grad += g @ b.data.T
                b.grad += a.data.T @ g
            else:
                raise NotImplementedError("matmul backward for these ranks")

        return Tensor(self.data @ other.data, (self, other), bwd)

    # -- reshapes / reductions ----------------------------------------------

    def reshape(self, *shape):
        def bwd(out, a=self):
            a.grad += out.grad.reshape(a.shape)

        return Tensor(self.data.reshape(*shape), (self,), bwd)

    def sum(self):
        def bwd(out, a=self):
            a.grad += np.full_like(a.data, float(out.grad))

        return Tensor(self.data.sum(), (self,), bwd)

    def mean(self):
        return self.sum() / self.data.size

    # -- nonlinearities ------------------------------------------------------

    def relu(self):
        mask = self.data > 0

        def bwd(out, a=self, m=mask):
            a.grad += out.grad * m

        return Tensor(np.where(mask, self.data, 0.0), (self,), bwd)

    def sigmoid(self):
        y = _sigmoid(self.data)

        def bwd(out, a=self, y=y):
            a.grad += out.grad * y * (1.0 - y)

        return Tensor(y, (self,), bwd)

    def softplus(self):
        """log(1 + exp(x)), evaluated stably."""
        y = np.logaddexp(0.0, self.data)

        def bwd(out, a=self):
            a.grad += out.grad * _sigmoid(a.data)

        return Tensor(y, (self,), bwd)

    def log(self):
        def bwd(out, a=self):
            a.grad += out.grad / a.data

        return Tensor(np.log(self.data), (self,), bwd)

    def exp(self):
        y = np.exp(self.data)

        def bwd(out, a=self, y=y):
            a.grad += out.grad * y

        return Tensor(y, (self,), bwd)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- structured ops ----------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor, pad: int) -> Tensor:
    """Same-size 2-D cross-correlation.

    x: (C, H, W); w: (O, C, k, k) with k odd and pad = (k-1)//2; b: (O,).
    """
    C, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if Cw != C or k != k2:
        raise ValueError(f"kernel {w.shape} does not match input {x.shape}")
    if pad != (k - 1) // 2:
        raise ValueError("pad must be (k-1)//2 to preserve spatial size")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # win: (C, H, W, k, k)
    y = np.tensordot(w.data, win, axes=([1, 2, 3], [0, 3, 4]))
    y += b.data[:, None, None]

    def bwd(out, x=x, w=w, b=b, win=win, pad=pad, k=k):
        g = out.grad  # (O, H, W)
        w.grad += np.tensordot(g, win, axes=([1, 2], [1, 2]))
        b.grad += g.sum(axis=(1, 2))
        # dx = correlation of g with spatially flipped kernels, summed over O
        wt = w.data[:, :, ::-1, ::-1]  # (O, C, k, k)
        gp = np.pad(g, ((0, 0), (pad, pad), (pad, pad)))
        gwin = np.lib.stride_tricks.sliding_window_view(gp, (k, k), axis=(1, 2))
        x.grad += np.tensordot(wt, gwin, axes=([0, 2, 3], [0, 3, 4]))

    return Tensor(y, (x, w, b), bwd)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map.  x: (..., I) with rank 1 or 2; w: (O, I); b: (O,)."""
    if x.data.shape[-1] != w.data.shape[1]:
        raise ValueError(
            f"input width {x.data.shape[-1]} != weight input dim {w.data.shape[1]}"
        )
    y = x.data @ w.data.T + b.data

    def bwd(out, x=x, w=w, b=b):
        g = out.grad
        if g.ndim == 1:
            w.grad += np.outer(g, x.data)
            b.grad += g
            x.grad += g @ w.data
        else:
            w.grad += g.T @ x.data
            b.grad += g.sum(axis=0)
            x.grad += g @ w.data

    return Tensor(y, (x, w, b), bwd)


def dropout_masked(x: Tensor, mask: np.ndarray, keep: float) -> Tensor:
    """Inverted dropout with a precomputed 0/1 mask and keep probability."""
    scale = mask / keep

    def bwd(out, x=x, scale=scale):
        x.grad += out.grad * scale

    return Tensor(x.data * scale, (x,), bwd)


def gather_patches(x: Tensor, rows: np.ndarray, cols: np.ndarray, half: int) -> Tensor:
    """Extract flattened (C, 2*half+1, 2*half+1) patches at (rows, cols).

    Patch centers must be at least `half` cells from every border.
    Returns (n, C*(2*half+1)^2).
    """
    C, H, W = x.shape
    k = 2 * half + 1
    n = len(rows)
    ri = rows[:, None, None] + np.arange(-half, half + 1)[None, :, None]
    ci = cols[:, None, None] + np.arange(-half, half + 1)[None, None, :]
    patches = x.data[:, ri, ci]  # (C, n, k, k)
    y = patches.transpose(1, 0, 2, 3).reshape(n, C * k * k)

    def bwd(out, x=x, ri=ri, ci=ci, n=n, k=k, C=C):
        g = out.grad.reshape(n, C, k, k).transpose(1, 0, 2, 3)
        np.add.at(x.grad, (slice(None), ri, ci), g)

    return Tensor(y, (x,), bwd)


def stack(tensors: list) -> Tensor:
    """Stack scalars/equal-shape tensors along a new leading axis."""
    data = np.stack([t.data for t in tensors])

    def bwd(out, ts=tensors):
        for i, t in enumerate(ts):
            t.grad += out.grad[i]

    return Tensor(data, tuple(tensors), bwd)


def smooth_l1_elem(x: Tensor, beta: float) -> Tensor:
    """Elementwise Huber-style penalty: 0.5 x^2/beta inside |x|<beta, else |x|-beta/2."""
    a = np.abs(x.data)
    inner = a < beta
    y = np.where(inner, 0.5 * x.data * x.data / beta, a - 0.5 * beta)

    def bwd(out, x=x, inner=inner, beta=beta):
        x.grad += out.grad * np.where(inner, x.data / beta, np.sign(x.data))

    return Tensor(y, (x,), bwd)
