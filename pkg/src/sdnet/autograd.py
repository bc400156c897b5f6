"""Minimal reverse-mode differentiation over numpy arrays.

Every network op used by the models has a differentiable wrapper here; the
numeric kernels live in :mod:`sdnet.tensor`, :mod:`sdnet.diffconv` and
:mod:`sdnet.stdc`. Graph recording is skipped inside :func:`no_grad`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import diffconv, stdc, tensor

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Var:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, idx):
        return index(self, idx)

    def backward(self, seed=None):
        backward(self, seed)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _record(value, parents: Sequence[Var], backward_fn) -> Var:
    out = Var(value)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(out: Var, seed=None) -> None:
    """Accumulate d(out)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    grads = {id(out): np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=out.value.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------- arithmetic


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _record(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _record(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _record(a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _record(a.value / b.value, (a, b),
                   lambda g: (_unbroadcast(g / b.value, a.shape),
                              _unbroadcast(-g * a.value / (b.value * b.value), b.shape)))


def square(x) -> Var:
    x = as_var(x)
    return _record(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,))


def log(x) -> Var:
    x = as_var(x)
    return _record(np.log(x.value), (x,), lambda g: (g / x.value,))


def clip(x, lo: float, hi: float) -> Var:
    x = as_var(x)
    inside = (x.value >= lo) & (x.value <= hi)
    return _record(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,))


def relu(x) -> Var:
    x = as_var(x)
    mask = x.value > 0
    return _record(x.value * mask, (x,), lambda g: (g * mask,))


def sigmoid(x) -> Var:
    x = as_var(x)
    s = tensor.sigmoid(x.value)
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


def total(x, axis=None, keepdims=False) -> Var:
    x = as_var(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _record(np.asarray(x.value.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x, axis=None, keepdims=False) -> Var:
    x = as_var(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return total(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape) -> Var:
    x = as_var(x)
    return _record(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Var:
    x = as_var(x)
    inv = np.argsort(axes)
    return _record(x.value.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def index(x, idx) -> Var:
    x = as_var(x)

    def bw(g):
        out = np.zeros_like(x.value)
        np.add.at(out, idx, g)
        return (out,)

    return _record(np.asarray(x.value[idx]), (x,), bw)


def concat(parts: Sequence, axis: int = 1) -> Var:
    parts = [as_var(p) for p in parts]
    if axis == 1:
        value = tensor.concat_channels([p.value for p in parts])
    else:
        value = np.concatenate([p.value for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _record(value, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def softmax(x) -> Var:
    """Softmax over a 1-D coefficient vector, max-shifted."""
    x = as_var(x)
    e = np.exp(x.value - x.value.max())
    s = e / e.sum()
    return _record(s, (x,), lambda g: (s * (g - (g * s).sum()),))


# --------------------------------------------------------------------------- network ops


def conv2d(x, w, b=None, desc: tensor.ConvDescriptor | None = None) -> Var:
    x, w = as_var(x), as_var(w)
    desc = desc or tensor.ConvDescriptor()
    parents = (x, w) if b is None else (x, w, as_var(b))
    value = tensor.conv2d(x.value, w.value, None if b is None else parents[2].value, desc)

    def bw(g):
        gx, gw, gb = tensor.conv2d_backward(x.value, w.value, g, desc)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _record(value, parents, bw)


def conv_plane3d(x, w, b=None, desc: tensor.ConvDescriptor | None = None, plane: str = "wt") -> Var:
    x, w = as_var(x), as_var(w)
    parents = (x, w) if b is None else (x, w, as_var(b))
    value = tensor.conv_plane3d(x.value, w.value, None if b is None else parents[2].value, desc, plane)

    def bw(g):
        gx, gw, gb = tensor.conv_plane3d_backward(x.value, w.value, g, desc, plane)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _record(value, parents, bw)


def pdc_direct(x, w, b, kind, desc: tensor.ConvDescriptor) -> Var:
    x, w = as_var(x), as_var(w)
    parents = (x, w) if b is None else (x, w, as_var(b))
    value = diffconv.pdc_direct(x.value, w.value, None if b is None else parents[2].value, kind, desc)

    def bw(g):
        gx, gw, gb = diffconv.pdc_direct_backward(x.value, w.value, kind, g, desc)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _record(value, parents, bw)


def stdc_direct(x, w, b, kind, plane: str, desc: tensor.ConvDescriptor) -> Var:
    x, w = as_var(x), as_var(w)
    parents = (x, w) if b is None else (x, w, as_var(b))
    value = stdc.stdc_direct(x.value, w.value, None if b is None else parents[2].value, kind, plane, desc)

    def bw(g):
        gx, gw, gb = stdc.stdc_direct_backward(x.value, w.value, kind, plane, g, desc)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _record(value, parents, bw)


def pdc_kernel(w, kind) -> Var:
    """Differentiable pixel-difference -> standard kernel transform."""
    w = as_var(w)
    return _record(diffconv.pdc_to_standard_kernel(w.value, kind), (w,),
                   lambda g: (diffconv.pdc_to_standard_kernel_adjoint(g, kind),))


def upsample(x, out_h: int, out_w: int) -> Var:
    x = as_var(x)
    h, w = x.shape[-2:]
    return _record(tensor.bilinear_upsample(x.value, out_h, out_w), (x,),
                   lambda g: (tensor.bilinear_upsample_backward(g, h, w),))


def frames_to_batch(clip) -> Var:
    """(N, C, T, H, W) -> (N*T, C, H, W)."""
    clip = as_var(clip)
    n, c, t, h, w = clip.shape
    return reshape(transpose(clip, (0, 2, 1, 3, 4)), (n * t, c, h, w))


def batch_to_frames(x, t: int) -> Var:
    """(N*T, C, H, W) -> (N, C, T, H, W)."""
    x = as_var(x)
    nt, c, h, w = x.shape
    return transpose(reshape(x, (nt // t, t, c, h, w)), (0, 2, 1, 3, 4))
