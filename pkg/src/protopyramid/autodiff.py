"""Reverse-mode automatic differentiation over numpy arrays.

Small deterministic tape: each op records its parents and a closure that
accumulates gradients into them. ``backward`` walks the tape in exact
reverse topological order. Only the operator set the model needs is
provided; conv and pool dispatch to the selected kernel backend.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels

_default_dtype = np.float64
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError("dtype must be float32 or float64")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference / projection)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- construction of non-leaf nodes -------------------------------------
    @staticmethod
    def _result(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
        return out

    # -- basic protocol ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, e):
        return power(self, e)

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor._result(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor._result(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._result(data, (a, b), bwd)


def power(a, e: float) -> Tensor:
    a = _wrap(a)
    data = a.data**e

    def bwd(g):
        a._accumulate(g * e * a.data ** (e - 1))

    return Tensor._result(data, (a,), bwd)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    data = np.sqrt(a.data)

    def bwd(g):
        a._accumulate(g / (2.0 * data))

    return Tensor._result(data, (a,), bwd)


def exp(a) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)

    def bwd(g):
        a._accumulate(g * data)

    return Tensor._result(data, (a,), bwd)


def log(a) -> Tensor:
    a = _wrap(a)
    data = np.log(a.data)

    def bwd(g):
        a._accumulate(g / a.data)

    return Tensor._result(data, (a,), bwd)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    data = a.data * mask

    def bwd(g):
        a._accumulate(g * mask)

    return Tensor._result(data, (a,), bwd)


# -- shape -------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)

    def bwd(g):
        a._accumulate(g.reshape(a.data.shape))

    return Tensor._result(data, (a,), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        pieces = np.split(g, len(tensors), axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece.reshape(t.data.shape))

    return Tensor._result(data, tuple(tensors), bwd)


# -- reductions --------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return Tensor._result(np.asarray(data), (a,), bwd)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax(a, axis: int) -> Tensor:
    """Max along one axis; gradient flows to the first-occurrence argmax."""
    a = _wrap(a)
    arg = a.data.argmax(axis=axis)
    data = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bwd(g):
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        a._accumulate(gx)

    return Tensor._result(data, (a,), bwd)


def topk_lastdim(a, k: int) -> Tensor:
    """Top-k values along the last axis, descending, ties by lowest index."""
    a = _wrap(a)
    n = a.data.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"topk: k={k} out of range for axis of length {n}")
    idx = np.argsort(-a.data, axis=-1, kind="stable")[..., :k]
    data = np.take_along_axis(a.data, idx, axis=-1)

    def bwd(g):
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, idx, g, axis=-1)
        a._accumulate(gx)

    return Tensor._result(data, (a,), bwd)


def take_rows(a, idx) -> Tensor:
    """Select rows along axis 0. idx: 1-D integer array."""
    a = _wrap(a)
    idx = np.asarray(idx)
    data = a.data[idx]

    def bwd(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        a._accumulate(gx)

    return Tensor._result(data, (a,), bwd)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T if b.data.ndim == 2 else np.outer(g, b.data))
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._result(data, (a, b), bwd)


def linear(x, w, b=None) -> Tensor:
    """x: (B, n), w: (m, n) -> (B, m)."""
    x, w = _wrap(x), _wrap(w)
    out = matmul(x, transpose2d(w))
    if b is not None:
        out = add(out, b)
    return out


def transpose2d(a) -> Tensor:
    a = _wrap(a)
    data = a.data.T

    def bwd(g):
        a._accumulate(g.T)

    return Tensor._result(np.ascontiguousarray(data), (a,), bwd)


def l2_normalize(a, axis: int, eps: float = 1e-12) -> Tensor:
    """Unit-normalize slices along ``axis``; norms below eps are clamped."""
    a = _wrap(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    clamped = np.maximum(norm, eps)
    data = a.data / clamped

    def bwd(g):
        dot = (g * a.data).sum(axis=axis, keepdims=True)
        live = (norm > eps).astype(a.data.dtype)
        a._accumulate(g / clamped - a.data * (dot / clamped**3) * live)

    return Tensor._result(data, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - inner))

    return Tensor._result(data, (a,), bwd)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy. logits: (B, C), labels: int array (B,)."""
    logits = _wrap(logits)
    labels = np.asarray(labels)
    b = logits.data.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    picked = logits.data[np.arange(b), labels]
    data = np.asarray((lse - picked).mean())

    def bwd(g):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(b), labels] -= 1.0
        logits._accumulate(g * probs / b)

    return Tensor._result(data, (logits,), bwd)


# -- image ops ---------------------------------------------------------------

def conv2d(x, k, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    x, k = _wrap(x), _wrap(k)
    data = kernels.conv2d_forward(x.data, k.data, stride, padding)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(kernels.conv2d_backward_input(g, k.data, x.data.shape, stride, padding))
        if k.requires_grad:
            k._accumulate(kernels.conv2d_backward_kernel(g, x.data, k.data.shape, stride, padding))

    out = Tensor._result(data, (x, k), bwd)
    if b is not None:
        out = add(out, reshape(b, (1, -1, 1, 1)))
    return out


def maxpool2d(x, window: int = 2, stride: int = 2) -> Tensor:
    x = _wrap(x)
    data, arg = kernels.maxpool2d_forward(x.data, window, stride)

    def bwd(g):
        x._accumulate(kernels.maxpool2d_backward(g, arg, x.data.shape, window, stride))

    return Tensor._result(data, (x,), bwd)


def _bilinear_coords(n_out: int, factor: int, n_in: int):
    src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    return i0, i1, w1


def upsample(x, factor: int, mode: str = "nearest") -> Tensor:
    """Spatial upsampling of (B, C, H, W) by an integer factor."""
    x = _wrap(x)
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    b, c, h, w = x.data.shape
    if mode == "nearest":
        data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

        def bwd(g):
            g = g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5))
            x._accumulate(g)

        return Tensor._result(data, (x,), bwd)
    if mode != "bilinear":
        raise ValueError(f"unknown upsample mode {mode!r}")

    y0, y1, wy = _bilinear_coords(h * factor, factor, h)
    x0, x1, wx = _bilinear_coords(w * factor, factor, w)
    wy = wy.astype(x.data.dtype)[:, None]
    wx = wx.astype(x.data.dtype)[None, :]
    c00 = (1 - wy) * (1 - wx)
    c01 = (1 - wy) * wx
    c10 = wy * (1 - wx)
    c11 = wy * wx
    data = (
        x.data[:, :, y0[:, None], x0[None, :]] * c00
        + x.data[:, :, y0[:, None], x1[None, :]] * c01
        + x.data[:, :, y1[:, None], x0[None, :]] * c10
        + x.data[:, :, y1[:, None], x1[None, :]] * c11
    )

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), y0[:, None], x0[None, :]), g * c00)
        np.add.at(gx, (slice(None), slice(None), y0[:, None], x1[None, :]), g * c01)
        np.add.at(gx, (slice(None), slice(None), y1[:, None], x0[None, :]), g * c10)
        np.add.at(gx, (slice(None), slice(None), y1[:, None], x1[None, :]), g * c11)
        x._accumulate(gx)

    return Tensor._result(data, (x,), bwd)


# -- verification ------------------------------------------------------------

def gradient_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map ``x`` (with requires_grad) to a scalar Tensor. Returns
    inf when any analytic or numeric value is non-finite.
    """
    x.requires_grad = True
    x.grad = None
    out = f(x)
    out.backward()
    analytic = x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x).item()
        flat[i] = orig - eps
        lo = f(x).item()
        flat[i] = orig
        nflat[i] = (hi - lo) / (2 * eps)
    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        return float("inf")
    denom = np.abs(analytic) + np.abs(numeric)
    # central differences carry roundoff noise ~ulp(|f|)/eps; for entries far
    # below the gradient's own scale that noise dominates any true error, so
    # floor the denominator at a fraction of the largest entry
    denom = np.maximum(denom, 1e-3 * denom.max() + 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
