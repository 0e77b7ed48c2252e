"""Reverse-mode automatic differentiation over numpy arrays.

A `Value` wraps an ndarray together with a gradient accumulator and a
backward rule; composing ops builds an acyclic graph that `backward`
traverses in reverse topological order. Only the compact set of ops needed
by the tracking networks is provided: elementwise arithmetic, (batched)
matmul, relu/sigmoid/tanh/sin, reductions, concat/reshape/slicing, and 2-D
convolution. Constant subgraphs (no trainable leaf underneath) are folded
eagerly so rollout graphs stay small.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DoubleBackwardError(RuntimeError):
    """backward() was called twice on the same loss without a grad reset."""


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Value:
    """Array node of the differentiation graph."""

    __slots__ = ("data", "grad", "needs_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, parents=(), needs_grad=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = None
        self._consumed = False
        if needs_grad is None:
            needs_grad = False
            for p in parents:
                if p.needs_grad:
                    needs_grad = True
                    break
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _acc(self, g: np.ndarray) -> None:
        # Out-of-place accumulation: stored grads may alias a child's grad
        # buffer, so in-place += would corrupt other nodes.
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def detach(self) -> "Value":
        """Constant copy of this node (cuts the graph, e.g. for truncated BPTT)."""
        return Value(self.data, needs_grad=False)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Value(shape={self.data.shape}, needs_grad={self.needs_grad})"

    # method forms used all over the model code
    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def sqrt(self):
        return sqrt(self)


class Param(Value):
    """Trainable leaf."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.asarray(data), needs_grad=True)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def constant(x, dtype=None) -> Value:
    arr = np.asarray(x, dtype=dtype)
    return Value(arr)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = Value(a.data + b.data, (a, b) if (a.needs_grad or b.needs_grad) else ())
    if not out.needs_grad:
        return out

    def bw():
        g = out.grad
        if a.needs_grad:
            a._acc(_unbroadcast(g, a.data.shape))
        if b.needs_grad:
            b._acc(_unbroadcast(g, b.data.shape))

    out._backward = bw
    return out


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = Value(a.data - b.data, (a, b) if (a.needs_grad or b.needs_grad) else ())
    if not out.needs_grad:
        return out

    def bw():
        g = out.grad
        if a.needs_grad:
            a._acc(_unbroadcast(g, a.data.shape))
        if b.needs_grad:
            b._acc(_unbroadcast(-g, b.data.shape))

    out._backward = bw
    return out


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = Value(a.data * b.data, (a, b) if (a.needs_grad or b.needs_grad) else ())
    if not out.needs_grad:
        return out

    def bw():
        g = out.grad
        if a.needs_grad:
            a._acc(_unbroadcast(g * b.data, a.data.shape))
        if b.needs_grad:
            b._acc(_unbroadcast(g * a.data, b.data.shape))

    out._backward = bw
    return out


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = Value(a.data / b.data, (a, b) if (a.needs_grad or b.needs_grad) else ())
    if not out.needs_grad:
        return out

    def bw():
        g = out.grad
        if a.needs_grad:
            a._acc(_unbroadcast(g / b.data, a.data.shape))
        if b.needs_grad:
            b._acc(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward = bw
    return out


def relu(a) -> Value:
    a = as_value(a)
    out = Value(np.maximum(a.data, 0), (a,) if a.needs_grad else ())
    if not out.needs_grad:
        return out

    def bw():
        a._acc(out.grad * (a.data > 0))

    out._backward = bw
    return out


def sigmoid(a) -> Value:
    a = as_value(a)
    # branch-free stable logistic: one exp of -|x|
    z = np.exp(-np.abs(a.data))
    s = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = Value(s, (a,) if a.needs_grad else ())
    if not out.needs_grad:
        return out

    def bw():
        a._acc(out.grad * s * (1.0 - s))

    out._backward = bw
    return out


def tanh(a) -> Value:
    a = as_value(a)
    t = np.tanh(a.data)
    out = Value(t, (a,) if a.needs_grad else ())
    if not out.needs_grad:
        return out

    def bw():
        a._acc(out.grad * (1.0 - t * t))

    out._backward = bw
    return out


def sin(a) -> Value:
    a = as_value(a)
    out = Value(np.sin(a.data), (a,) if a.needs_grad else ())
    if not out.needs_grad:
        return out

    def bw():
        a._acc(out.grad * np.cos(a.data))

    out._backward = bw
    return out


def exp(a) -> Value:
    a = as_value(a)
    e = np.exp(a.data)
    out = Value(e, (a,) if a.needs_grad else ())
    if not out.needs_grad:
        return out

    def bw():
        a._acc(out.grad * e)

    out._backward = bw
    return out


def sqrt(a) -> Value:
    a = as_value(a)
    r = np.sqrt(a.data)
    out = Value(r, (a,) if a.needs_grad else ())
    if not out.needs_grad:
        return out

    def bw():
        a._acc(out.grad * (0.5 / r))

    out._backward = bw
    return out


def square(a) -> Value:
    a = as_value(a)
    out = Value(a.data * a.data, (a,) if a.needs_grad else ())
    if not out.needs_grad:
        return out

    def bw():
        a._acc(out.grad * (2.0 * a.data))

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = Value(np.matmul(a.data, b.data), (a, b) if (a.needs_grad or b.needs_grad) else ())
    if not out.needs_grad:
        return out

    def bw():
        g = out.grad
        if a.needs_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._acc(_unbroadcast(ga, a.data.shape))
        if b.needs_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._acc(_unbroadcast(gb, b.data.shape))

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def vsum(a, axis=None, keepdims=False) -> Value:
    a = as_value(a)
    out = Value(a.data.sum(axis=axis, keepdims=keepdims), (a,) if a.needs_grad else ())
    if not out.needs_grad:
        return out

    def bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._acc(np.broadcast_to(g, a.data.shape))

    out._backward = bw
    return out


def vmean(a, axis=None, keepdims=False) -> Value:
    a = as_value(a)
    out = Value(a.data.mean(axis=axis, keepdims=keepdims), (a,) if a.needs_grad else ())
    if not out.needs_grad:
        return out
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._acc(np.broadcast_to(g, a.data.shape) / count)

    out._backward = bw
    return out


def reshape(a, shape) -> Value:
    a = as_value(a)
    out = Value(a.data.reshape(shape), (a,) if a.needs_grad else ())
    if not out.needs_grad:
        return out

    def bw():
        a._acc(out.grad.reshape(a.data.shape))

    out._backward = bw
    return out


def getitem(a, idx) -> Value:
    a = as_value(a)
    out = Value(a.data[idx], (a,) if a.needs_grad else ())
    if not out.needs_grad:
        return out

    def bw():
        g = np.zeros_like(a.data)
        g[idx] = out.grad
        a._acc(g)

    out._backward = bw
    return out


def concat(vals, axis=-1) -> Value:
    vals = [as_value(v) for v in vals]
    needs = any(v.needs_grad for v in vals)
    out = Value(np.concatenate([v.data for v in vals], axis=axis), tuple(vals) if needs else ())
    if not needs:
        return out
    sizes = [v.data.shape[axis] for v in vals]

    def bw():
        g = out.grad
        start = 0
        index = [slice(None)] * g.ndim
        for v, s in zip(vals, sizes):
            if v.needs_grad:
                index[axis] = slice(start, start + s)
                v._acc(g[tuple(index)])
            start += s

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# 2-D convolution (NCHW, square kernel)


def _conv_out_side(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Value:
    """Cross-correlation of x:(B,C,H,W) with w:(F,C,k,k) plus bias b:(F,)."""
    x, w = as_value(x), as_value(w)
    if b is not None:
        b = as_value(b)
    bsz, cin, h_in, w_in = x.data.shape
    f_out, cw, k, k2 = w.data.shape
    if cw != cin or k != k2:
        raise ShapeError(f"conv2d weight {w.data.shape} incompatible with input {x.data.shape}")
    h_out = _conv_out_side(h_in, k, stride, padding)
    w_out = _conv_out_side(w_in, k, stride, padding)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # gather k*k strided slabs; cheaper and simpler than a scatter-based im2col
    cols = np.empty((bsz, cin, k, k, h_out, w_out), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i: i + stride * h_out: stride, j: j + stride * w_out: stride]
    cols2 = cols.reshape(bsz, cin * k * k, h_out * w_out)
    wmat = w.data.reshape(f_out, cin * k * k)
    out_data = np.matmul(wmat, cols2)
    if b is not None:
        out_data += b.data.reshape(1, f_out, 1)
    out_data = out_data.reshape(bsz, f_out, h_out, w_out)

    parents = [p for p in (x, w, b) if p is not None]
    if not any(p.needs_grad for p in parents):
        return Value(out_data)
    out = Value(out_data, tuple(parents))

    def bw():
        g = out.grad.reshape(bsz, f_out, h_out * w_out)
        if b is not None and b.needs_grad:
            b._acc(g.sum(axis=(0, 2)))
        if w.needs_grad:
            gw = np.tensordot(g, cols2, axes=((0, 2), (0, 2)))
            w._acc(gw.reshape(w.data.shape))
        if x.needs_grad:
            gcols = np.matmul(wmat.T, g)  # (B, C*k*k, L)
            gcols = gcols.reshape(bsz, cin, k, k, h_out, w_out)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i: i + stride * h_out: stride, j: j + stride * w_out: stride] += gcols[:, :, i, j]
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            x._acc(gxp)

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# graph traversal


def backward(loss: Value) -> None:
    """Populate .grad of every trainable leaf reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise DoubleBackwardError("backward already ran on this loss; zero grads and rebuild the graph")
    loss._consumed = True

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.needs_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


# ---------------------------------------------------------------------------
# finite-difference verification


def finite_difference_check(build_loss, leaves, eps=1e-5, max_entries=None, rng=None) -> float:
    """Max relative error between backprop gradients and central differences.

    `build_loss` must construct a fresh scalar-loss graph from the given leaf
    Values each time it is called (their .data is perturbed in place). With
    `max_entries` set, only that many randomly chosen entries per leaf are
    probed, which keeps large parameter tensors affordable.
    """
    for leaf in leaves:
        leaf.grad = None
    loss = build_loss()
    backward(loss)
    analytic = [np.zeros_like(leaf.data) if leaf.grad is None else np.array(leaf.grad) for leaf in leaves]

    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for leaf, ana in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idxs = rng.choice(n, size=max_entries, replace=False)
        else:
            idxs = range(n)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(build_loss().data)
            flat[i] = orig - eps
            lo = float(build_loss().data)
            flat[i] = orig
            num = (hi - lo) / (2 * eps)
            ref = ana.reshape(-1)[i]
            # the floor turns the check absolute for near-zero gradients,
            # where central differences bottom out at round-off noise
            err = abs(num - ref) / max(abs(num), abs(ref), 1e-3)
            worst = max(worst, err)
    for leaf in leaves:
        leaf.grad = None
    return worst
