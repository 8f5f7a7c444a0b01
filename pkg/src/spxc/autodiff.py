"""Minimal reverse-mode automatic differentiation over numpy arrays.

The engine records a tape of primitive operations as :class:`Tensor` objects
are combined, and :meth:`Tensor.backward` walks the tape in reverse
topological order.  Only the primitives needed by the models in this package
are provided; each one carries its own backward closure.  Convolutions are
implemented with ``sliding_window_view`` + ``tensordot`` so the heavy lifting
lands in BLAS.

Gradient mode is on by default and can be suspended with :func:`no_grad`
(used for evaluation and sampling, where recording the tape would only waste
memory).
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Context manager that disables tape recording."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph construction --------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Backpropagate from this (scalar) tensor through the tape."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # free intermediate graph state as we go
            if node is not self:
                node._parents = ()
                node._backward = None

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, -other if np.isscalar(other) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])


def as_tensor(x, requires_grad=False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad)


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / arithmetic primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a = as_tensor(a)
    # python scalars stay scalars so float32 graphs are not upcast
    bv = b.data if isinstance(b, Tensor) else b
    data = a.data + bv

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    parents = (a, b) if isinstance(b, Tensor) else (a,)
    return _make(data, parents, backward)


def mul(a, b):
    a = as_tensor(a)
    bv = b.data if isinstance(b, Tensor) else b
    data = a.data * bv

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * bv, a.data.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    parents = (a, b) if isinstance(b, Tensor) else (a,)
    return _make(data, parents, backward)


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _make(data, (a,), backward)


def log(a):
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(data, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - data * data))

    return _make(data, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def softplus(a):
    """log(1 + e^x), computed without overflow."""
    a = as_tensor(a)
    x = a.data
    data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        a._accumulate(g * s)

    return _make(data, (a,), backward)


def elu(a):
    a = as_tensor(a)
    x = a.data
    neg = x < 0
    data = np.where(neg, np.expm1(np.minimum(x, 0.0)), x)

    def backward(g):
        a._accumulate(g * np.where(neg, data + 1.0, 1.0))

    return _make(data, (a,), backward)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    data = a.data * mask

    def backward(g):
        a._accumulate(g * mask)

    return _make(data, (a,), backward)


def square(a):
    a = as_tensor(a)
    data = a.data * a.data

    def backward(g):
        a._accumulate(g * (2.0 * a.data))

    return _make(data, (a,), backward)


def maximum_const(a, c):
    """Elementwise max(a, c); gradient flows only where a > c."""
    a = as_tensor(a)
    mask = a.data > c
    data = np.maximum(a.data, c)

    def backward(g):
        a._accumulate(g * mask)

    return _make(data, (a,), backward)


def minimum_const(a, c):
    a = as_tensor(a)
    mask = a.data < c
    data = np.minimum(a.data, c)

    def backward(g):
        a._accumulate(g * mask)

    return _make(data, (a,), backward)


def clip(a, lo, hi):
    return minimum_const(maximum_const(a, lo), hi)


def where(cond, a, b):
    """Select from a/b by a boolean numpy mask; grads route per element."""
    cond = np.asarray(cond, dtype=bool)
    a = as_tensor(a)
    b = as_tensor(b)
    data = np.where(cond, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * cond, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~cond, b.data.shape))

    return _make(data, (a, b), backward)


def dropout(a, rate, rng):
    """Inverted dropout; `rng` supplies the mask so runs are replayable."""
    a = as_tensor(a)
    keep = 1.0 - rate
    mask = (rng.random(a.data.shape) < keep).astype(a.data.dtype) / keep

    def backward(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), backward)


def stop_gradient(a):
    a = as_tensor(a)
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# reductions / shape ops
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % a.data.ndim for ax in axes)
            shape = tuple(1 if i in axes else s for i, s in enumerate(a.data.shape))
            g = g.reshape(shape)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _make(data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(old))

    return _make(data, (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _make(data, (a,), backward)


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int)) or p is None or p is Ellipsis for p in parts)


def getitem(a, idx):
    a = as_tensor(a)
    data = a.data[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(data, (a,), backward)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(data, tuple(tensors), backward)


def pad2d(a, pads):
    """Zero-pad the last two axes of a 4-D tensor; pads = (top, bottom, left, right)."""
    a = as_tensor(a)
    t, b, l, r = pads
    data = np.pad(a.data, ((0, 0), (0, 0), (t, b), (l, r)))
    H, W = a.data.shape[2], a.data.shape[3]

    def backward(g):
        a._accumulate(g[:, :, t:t + H, l:l + W])

    return _make(data, (a,), backward)


def matmul(a, b):
    """2-D matrix product (n,k)@(k,m)."""
    a = as_tensor(a)
    b = as_tensor(b)
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward)


# ---------------------------------------------------------------------------
# convolution and resampling primitives (NCHW layout)
# ---------------------------------------------------------------------------


def _conv_windows(x, kh, kw, stride):
    w = sliding_window_view(x, (kh, kw), axis=(2, 3))
    if stride > 1:
        w = w[:, :, ::stride, ::stride]
    return w  # (B, C, Ho, Wo, kh, kw)


def conv2d(x, w, stride=1):
    """Valid cross-correlation of x (B,Cin,H,W) with w (Cout,Cin,kh,kw).

    Padding is expressed separately via :func:`pad2d` so that the asymmetric
    pads used by causal (shifted) convolutions stay explicit.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    kh, kw = w.data.shape[2], w.data.shape[3]
    win = _conv_windows(x.data, kh, kw, stride)
    # (B,Cin,Ho,Wo,kh,kw) x (Cout,Cin,kh,kw) -> (B,Ho,Wo,Cout)
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))
    data = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        if w.requires_grad:
            wwin = _conv_windows(x.data, kh, kw, stride)
            # (B,Cout,Ho,Wo) x (B,Cin,Ho,Wo,kh,kw) -> (Cout,Cin,kh,kw)
            dw = np.tensordot(g, wwin, axes=([0, 2, 3], [0, 2, 3]))
            w._accumulate(dw)
        if x.requires_grad:
            B, _, H, W = x.data.shape
            Ho, Wo = g.shape[2], g.shape[3]
            if stride > 1:
                gd = np.zeros((B, g.shape[1], (Ho - 1) * stride + 1, (Wo - 1) * stride + 1), dtype=g.dtype)
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = g
            gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wflip = w.data[:, :, ::-1, ::-1]
            gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
            dx = np.tensordot(gwin, wflip, axes=([1, 4, 5], [0, 2, 3]))
            dx = dx.transpose(0, 3, 1, 2)
            # ragged stride tails never touched the input; pad them back as zeros
            if dx.shape[2] < H or dx.shape[3] < W:
                dx = np.pad(dx, ((0, 0), (0, 0), (0, H - dx.shape[2]), (0, W - dx.shape[3])))
            x._accumulate(dx)

    return _make(data, (x, w), backward)


def zero_stuff2(a):
    """Upsample 2x by placing entries at even coordinates, zeros elsewhere."""
    a = as_tensor(a)
    B, C, H, W = a.data.shape
    data = np.zeros((B, C, 2 * H, 2 * W), dtype=a.data.dtype)
    data[:, :, ::2, ::2] = a.data

    def backward(g):
        a._accumulate(g[:, :, ::2, ::2])

    return _make(data, (a,), backward)


def upsample_nearest2(a):
    a = as_tensor(a)
    data = a.data.repeat(2, axis=2).repeat(2, axis=3)
    B, C, H, W = a.data.shape

    def backward(g):
        a._accumulate(g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)))

    return _make(data, (a,), backward)


def maxpool2(a):
    """2x2 max pooling, stride 2; even spatial dims required."""
    a = as_tensor(a)
    B, C, H, W = a.data.shape
    blocks = a.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = blocks.argmax(axis=-1)
    data = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        db = np.zeros_like(blocks)
        np.put_along_axis(db, arg[..., None], g[..., None], axis=-1)
        da = db.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        a._accumulate(da)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------


def shift_down(a):
    """Move rows down one step, zero-filling the first row."""
    a = as_tensor(a)
    H = a.data.shape[2]
    return getitem(pad2d(a, (1, 0, 0, 0)), (slice(None), slice(None), slice(0, H), slice(None)))


def shift_right(a):
    a = as_tensor(a)
    W = a.data.shape[3]
    return getitem(pad2d(a, (0, 0, 1, 0)), (slice(None), slice(None), slice(None), slice(0, W)))


def concat_elu(a):
    return elu(concat([a, mul(a, -1.0)], axis=1))


def logsumexp(a, axis, keepdims=False):
    a = as_tensor(a)
    m = stop_gradient(Tensor(a.data.max(axis=axis, keepdims=True)))
    out = add(log(sum_(exp(add(a, mul(m, -1.0))), axis=axis, keepdims=True)), m)
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


def log_softmax(a, axis):
    return add(a, mul(logsumexp(a, axis=axis, keepdims=True), -1.0))
