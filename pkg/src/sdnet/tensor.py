"""Dense tensor substrate: padding, convolution, resampling and pointwise ops.

Tensors are plain :class:`numpy.ndarray` objects. Layout follows the rank:
images are ``(N, C, H, W)`` and clips are ``(N, C, T, H, W)``. Every op
preserves the input dtype, so float32 is the production path and float64 is
used wherever an oracle needs headroom.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

PAD_MODES = ("zero", "replicate")


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


def _tuple(value, n: int, name: str) -> tuple:
    if isinstance(value, (int, np.integer, str)):
        return (value,) * n
    value = tuple(value)
    if len(value) != n:
        raise ShapeError(f"{name} needs {n} entries, got {len(value)}")
    return value


@dataclass(frozen=True)
class ConvDescriptor:
    """Stride, padding, dilation, grouping and padding mode of a convolution.

    Scalars are broadcast over the spatial axes (2 for images, 3 for clips).
    """

    stride: int | tuple = 1
    padding: int | tuple = 0
    dilation: int | tuple = 1
    groups: int = 1
    pad_mode: str | tuple = "zero"
    ndim: int = 2

    def __post_init__(self):
        n = self.ndim
        object.__setattr__(self, "stride", _tuple(self.stride, n, "stride"))
        object.__setattr__(self, "padding", _tuple(self.padding, n, "padding"))
        object.__setattr__(self, "dilation", _tuple(self.dilation, n, "dilation"))
        object.__setattr__(self, "pad_mode", _tuple(self.pad_mode, n, "pad_mode"))
        if any(s < 1 for s in self.stride):
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if any(d < 1 for d in self.dilation):
            raise ShapeError(f"dilation must be >= 1, got {self.dilation}")
        if any(p < 0 for p in self.padding):
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        if self.groups < 1:
            raise ShapeError(f"groups must be >= 1, got {self.groups}")
        for mode in self.pad_mode:
            if mode not in PAD_MODES:
                raise ShapeError(f"unknown padding mode {mode!r}")


def make_desc(desc: ConvDescriptor | None, ndim: int = 2, **kw) -> ConvDescriptor:
    if desc is None:
        return ConvDescriptor(ndim=ndim, **kw)
    if kw:
        raise TypeError("pass either a ConvDescriptor or keyword options, not both")
    if desc.ndim != ndim:
        raise ShapeError(f"descriptor is {desc.ndim}-D, operation needs {ndim}-D")
    return desc


def conv_output_size(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


# --------------------------------------------------------------------------- padding


def pad(x: np.ndarray, amounts: Sequence, modes: Sequence[str] | str = "zero") -> np.ndarray:
    """Pad trailing axes of ``x``.

    ``amounts`` holds one ``(before, after)`` pair (or a single int) per padded
    axis, aligned to the end of ``x.shape``. ``modes`` is ``"zero"`` or
    ``"replicate"`` per axis.
    """
    amounts = [(a, a) if isinstance(a, (int, np.integer)) else tuple(a) for a in amounts]
    modes = _tuple(modes, len(amounts), "modes")
    if len(amounts) > x.ndim:
        raise ShapeError(f"cannot pad {len(amounts)} axes of a rank-{x.ndim} tensor")
    lead = x.ndim - len(amounts)
    out = x
    for i, ((before, after), mode) in enumerate(zip(amounts, modes)):
        if before < 0 or after < 0:
            raise ShapeError(f"padding amounts must be >= 0, got {(before, after)}")
        if mode not in PAD_MODES:
            raise ShapeError(f"unknown padding mode {mode!r}")
        if before == 0 and after == 0:
            continue
        width = [(0, 0)] * x.ndim
        width[lead + i] = (before, after)
        out = np.pad(out, width, mode="constant" if mode == "zero" else "edge")
    return out


def pad_backward(g: np.ndarray, amounts: Sequence, modes: Sequence[str] | str = "zero") -> np.ndarray:
    """Adjoint of :func:`pad`: fold padded-region gradients back onto the input."""
    amounts = [(a, a) if isinstance(a, (int, np.integer)) else tuple(a) for a in amounts]
    modes = _tuple(modes, len(amounts), "modes")
    lead = g.ndim - len(amounts)
    out = g
    for i in reversed(range(len(amounts))):
        before, after = amounts[i]
        if before == 0 and after == 0:
            continue
        axis = lead + i
        n = out.shape[axis] - before - after
        inner = np.take(out, np.arange(before, before + n), axis=axis).copy()
        if modes[i] == "replicate":
            idx = [slice(None)] * out.ndim
            if before:
                head = np.take(out, np.arange(0, before), axis=axis).sum(axis=axis)
                idx[axis] = 0
                inner[tuple(idx)] += head
            if after:
                tail = np.take(out, np.arange(before + n, before + n + after), axis=axis).sum(axis=axis)
                idx[axis] = n - 1
                inner[tuple(idx)] += tail
        out = inner
    return out


# --------------------------------------------------------------------------- conv2d


def _check_conv2d(x, weight, bias, desc):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects an (N, C, H, W) image, got rank {x.ndim}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weights must be (out, in/groups, kh, kw), got rank {weight.ndim}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    g = desc.groups
    if c % g or o % g:
        raise ShapeError(f"groups={g} must divide input channels {c} and output channels {o}")
    if cg * g != c:
        raise ShapeError(f"channel axis mismatch: input has {c} channels, weights expect {cg * g}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias must have shape ({o},), got {bias.shape}")
    ho = conv_output_size(h, kh, desc.stride[0], desc.padding[0], desc.dilation[0])
    wo = conv_output_size(w, kw, desc.stride[1], desc.padding[1], desc.dilation[1])
    if ho < 1:
        raise ShapeError(f"height axis too small: {h} with kernel {kh}, padding {desc.padding[0]}")
    if wo < 1:
        raise ShapeError(f"width axis too small: {w} with kernel {kw}, padding {desc.padding[1]}")
    return ho, wo


def _window(xg: np.ndarray, pos: Sequence[int], out: Sequence[int], stride, dilation) -> np.ndarray:
    idx = [Ellipsis]
    for p, o, s, d in zip(pos, out, stride, dilation):
        start = p * d
        idx.append(slice(start, start + s * (o - 1) + 1, s))
    return xg[tuple(idx)]


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           desc: ConvDescriptor | None = None, **kw) -> np.ndarray:
    """Grouped, strided, dilated 2-D cross-correlation.

    The kernel is applied tap by tap; each tap is one (grouped) matrix product
    over channels, or a broadcast multiply for depthwise layers.
    """
    desc = make_desc(desc, 2, **kw)
    ho, wo = _check_conv2d(x, weight, bias, desc)
    n, c = x.shape[:2]
    o, cg, kh, kw_ = weight.shape
    g = desc.groups
    og = o // g
    xp = pad(x, desc.padding, desc.pad_mode).reshape(n, g, cg, *pad_shape(x.shape[2:], desc.padding))
    wg = weight.reshape(g, og, cg, kh, kw_)
    dtype = np.result_type(x, weight)
    out = np.zeros((n, g, og, ho * wo), dtype=dtype)
    depthwise = cg == 1 and og == 1
    for i in range(kh):
        for j in range(kw_):
            patch = _window(xp, (i, j), (ho, wo), desc.stride, desc.dilation).reshape(n, g, cg, ho * wo)
            if depthwise:
                out += wg[None, :, :, 0, i, j, None] * patch
            else:
                out += np.matmul(wg[:, :, :, i, j], patch)
    out = out.reshape(n, o, ho, wo)
    if bias is not None:
        out += bias.reshape(1, o, 1, 1)
    return out


def pad_shape(spatial: Sequence[int], padding: Sequence[int]) -> tuple:
    return tuple(s + 2 * p for s, p in zip(spatial, padding))


def conv2d_backward(x: np.ndarray, weight: np.ndarray, gout: np.ndarray,
                    desc: ConvDescriptor | None = None, **kw):
    """Gradients of :func:`conv2d` with respect to input, weight and bias."""
    desc = make_desc(desc, 2, **kw)
    ho, wo = _check_conv2d(x, weight, None, desc)
    n, c = x.shape[:2]
    o, cg, kh, kw_ = weight.shape
    g = desc.groups
    og = o // g
    padded = pad_shape(x.shape[2:], desc.padding)
    xp = pad(x, desc.padding, desc.pad_mode).reshape(n, g, cg, *padded)
    wg = weight.reshape(g, og, cg, kh, kw_)
    go = gout.reshape(n, g, og, ho * wo)
    gxp = np.zeros((n, g, cg) + padded, dtype=np.result_type(x, gout))
    gw = np.zeros((g, og, cg, kh, kw_), dtype=np.result_type(weight, gout))
    depthwise = cg == 1 and og == 1
    for i in range(kh):
        for j in range(kw_):
            patch = _window(xp, (i, j), (ho, wo), desc.stride, desc.dilation).reshape(n, g, cg, ho * wo)
            view = _window(gxp, (i, j), (ho, wo), desc.stride, desc.dilation)
            if depthwise:
                gw[:, 0, 0, i, j] = np.einsum("ngp,ngp->g", go[:, :, 0], patch[:, :, 0])
                view += (wg[None, :, :, 0, i, j, None] * go).reshape(view.shape)
            else:
                gw[:, :, :, i, j] = np.matmul(go, patch.transpose(0, 1, 3, 2)).sum(axis=0)
                view += np.matmul(wg[:, :, :, i, j].transpose(0, 2, 1), go).reshape(view.shape)
    gx = pad_backward(gxp.reshape((n, c) + padded), desc.padding, desc.pad_mode)
    gb = gout.sum(axis=(0, 2, 3))
    return gx, gw.reshape(weight.shape), gb


def conv2d_naive(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                 desc: ConvDescriptor | None = None, **kw) -> np.ndarray:
    """Scalar-loop reference convolution.

    Out-of-range taps are resolved inline (zero or clamped index), so this
    shares no code with :func:`pad` or :func:`conv2d`. Taps are summed in
    row-major order.
    """
    desc = make_desc(desc, 2, **kw)
    ho, wo = _check_conv2d(x, weight, bias, desc)
    n, c, h, w = x.shape
    o, cg, kh, kw_ = weight.shape
    og = o // desc.groups
    sh, sw = desc.stride
    ph, pw = desc.padding
    dh, dw = desc.dilation
    mh, mw = desc.pad_mode
    out = np.zeros((n, o, ho, wo), dtype=np.result_type(x, weight))

    def sample(b, ch, r, col):
        if r < 0 or r >= h:
            if mh == "zero":
                return 0.0
            r = min(max(r, 0), h - 1)
        if col < 0 or col >= w:
            if mw == "zero":
                return 0.0
            col = min(max(col, 0), w - 1)
        return x[b, ch, r, col]

    for b in range(n):
        for oc in range(o):
            grp = oc // og
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ic in range(cg):
                        for i in range(kh):
                            for j in range(kw_):
                                acc += weight[oc, ic, i, j] * sample(
                                    b, grp * cg + ic, y * sh - ph + i * dh, xx * sw - pw + j * dw)
                    if bias is not None:
                        acc += bias[oc]
                    out[b, oc, y, xx] = acc
    return out


# --------------------------------------------------------------------------- plane-sliced 3-D conv

PLANES = ("wt", "ht")


def _plane_axis(plane: str) -> int:
    """Clip axis (of N, C, T, H, W) that the plane does not span."""
    if plane == "wt":
        return 3
    if plane == "ht":
        return 4
    raise ShapeError(f"unknown plane {plane!r}; expected 'wt' or 'ht'")


def _check_plane(x, weight, plane):
    if x.ndim != 5:
        raise ShapeError(f"expected an (N, C, T, H, W) clip, got rank {x.ndim}")
    if weight.ndim != 5:
        raise ShapeError(f"plane kernels must be (out, in/groups, kt, kh, kw), got rank {weight.ndim}")
    kt, kh, kw = weight.shape[2:]
    if plane == "wt" and kh != 1:
        raise ShapeError(f"WT plane needs kernel extents (kt, 1, kw), got {(kt, kh, kw)}")
    if plane == "ht" and kw != 1:
        raise ShapeError(f"HT plane needs kernel extents (kt, kh, 1), got {(kt, kh, kw)}")
    return _plane_axis(plane)


def default_plane_desc(padding=(1, 1, 1), stride=1, groups=1) -> ConvDescriptor:
    return ConvDescriptor(stride=stride, padding=padding, groups=groups,
                          pad_mode=("replicate", "zero", "zero"), ndim=3)


def _fold(x, axis, amount, mode, stride):
    """Move the unsliced axis into the batch: (N,C,T,H,W) -> (N*S, C, T, other)."""
    if amount:
        amounts = [(0, 0)] * 3
        amounts[axis - 2] = (amount, amount)
        x = pad(x, amounts, ("zero", mode if axis == 3 else "zero", mode if axis == 4 else "zero"))
    sl = [slice(None)] * 5
    sl[axis] = slice(None, None, stride)
    x = x[tuple(sl)]
    n, c, t = x.shape[:3]
    if axis == 3:
        s, other = x.shape[3], x.shape[4]
        return x.transpose(0, 3, 1, 2, 4).reshape(n * s, c, t, other), s
    s, other = x.shape[4], x.shape[3]
    return x.transpose(0, 4, 1, 2, 3).reshape(n * s, c, t, other), s


def _unfold(y, n, s, axis):
    ns, o, t, other = y.shape
    y = y.reshape(n, s, o, t, other)
    if axis == 3:
        return y.transpose(0, 2, 3, 1, 4)
    return y.transpose(0, 2, 3, 4, 1)


def _plane_desc2d(desc: ConvDescriptor, axis: int) -> ConvDescriptor:
    keep = (0, 2) if axis == 3 else (0, 1)
    return ConvDescriptor(
        stride=tuple(desc.stride[k] for k in keep),
        padding=tuple(desc.padding[k] for k in keep),
        dilation=tuple(desc.dilation[k] for k in keep),
        groups=desc.groups,
        pad_mode=tuple(desc.pad_mode[k] for k in keep),
    )


def _plane_weight2d(weight, axis):
    return weight[:, :, :, 0, :] if axis == 3 else weight[:, :, :, :, 0]


def conv_plane3d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                 desc: ConvDescriptor | None = None, plane: str = "wt") -> np.ndarray:
    """3-D convolution whose kernel lies in the W-T or H-T plane.

    The axis outside the plane is folded into the batch and the remaining
    (T, spatial) slices go through :func:`conv2d`. The default descriptor uses
    replicate padding along time and zero padding in space.
    """
    axis = _check_plane(x, weight, plane)
    if desc is None:
        k = weight.shape[2:]
        desc = default_plane_desc(padding=tuple((e - 1) // 2 for e in k))
    desc = make_desc(desc, 3)
    n = x.shape[0]
    folded, s = _fold(x, axis, desc.padding[axis - 2], desc.pad_mode[axis - 2], desc.stride[axis - 2])
    y = conv2d(folded, _plane_weight2d(weight, axis), bias, _plane_desc2d(desc, axis))
    return _unfold(y, n, s, axis)


def conv_plane3d_backward(x, weight, gout, desc=None, plane="wt"):
    axis = _check_plane(x, weight, plane)
    if desc is None:
        desc = default_plane_desc(padding=tuple((e - 1) // 2 for e in weight.shape[2:]))
    n = x.shape[0]
    amount, mode, stride = desc.padding[axis - 2], desc.pad_mode[axis - 2], desc.stride[axis - 2]
    folded, s = _fold(x, axis, amount, mode, stride)
    if axis == 3:
        gfold = gout.transpose(0, 3, 1, 2, 4).reshape(n * s, *folded.shape[1:])
    else:
        gfold = gout.transpose(0, 4, 1, 2, 3).reshape(n * s, *folded.shape[1:])
    gx2, gw2, gb = conv2d_backward(folded, _plane_weight2d(weight, axis), gfold, _plane_desc2d(desc, axis))
    gsel = _unfold(gx2, n, s, axis)
    # undo the stride selection and padding on the unsliced axis
    padded = list(x.shape)
    padded[axis] += 2 * amount
    gpad = np.zeros(padded, dtype=gsel.dtype)
    sl = [slice(None)] * 5
    sl[axis] = slice(None, None, stride)
    gpad[tuple(sl)] = gsel
    if amount:
        amounts = [(0, 0)] * 3
        amounts[axis - 2] = (amount, amount)
        gx = pad_backward(gpad, amounts, ("zero", mode if axis == 3 else "zero", mode if axis == 4 else "zero"))
    else:
        gx = gpad
    gw = np.expand_dims(gw2, axis=3 if axis == 3 else 4)
    return gx, gw, gb


def conv3d_naive(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                 desc: ConvDescriptor | None = None) -> np.ndarray:
    """Scalar-loop 3-D convolution over (T, H, W) with per-axis padding modes."""
    if desc is None:
        desc = default_plane_desc(padding=tuple((e - 1) // 2 for e in weight.shape[2:]))
    n, c, *dims = x.shape
    o, cg = weight.shape[:2]
    ks = weight.shape[2:]
    og = o // desc.groups
    outs = [conv_output_size(dims[a], ks[a], desc.stride[a], desc.padding[a], desc.dilation[a]) for a in range(3)]
    out = np.zeros((n, o, *outs), dtype=np.result_type(x, weight))

    def sample(b, ch, pos):
        p = list(pos)
        for a in range(3):
            if p[a] < 0 or p[a] >= dims[a]:
                if desc.pad_mode[a] == "zero":
                    return 0.0
                p[a] = min(max(p[a], 0), dims[a] - 1)
        return x[b, ch, p[0], p[1], p[2]]

    for b in range(n):
        for oc in range(o):
            grp = oc // og
            for ot in range(outs[0]):
                for oh in range(outs[1]):
                    for ow in range(outs[2]):
                        acc = 0.0
                        for ic in range(cg):
                            for i in range(ks[0]):
                                for j in range(ks[1]):
                                    for k in range(ks[2]):
                                        pos = (ot * desc.stride[0] - desc.padding[0] + i * desc.dilation[0],
                                               oh * desc.stride[1] - desc.padding[1] + j * desc.dilation[1],
                                               ow * desc.stride[2] - desc.padding[2] + k * desc.dilation[2])
                                        acc += weight[oc, ic, i, j, k] * sample(b, grp * cg + ic, pos)
                        if bias is not None:
                            acc += bias[oc]
                        out[b, oc, ot, oh, ow] = acc
    return out


# --------------------------------------------------------------------------- resampling


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation matrix (n_out x n_in), half-pixel centres, edge clamped."""
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"interpolation extents must be >= 1, got {n_in} -> {n_out}")
    a = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        a[i, i0] += 1.0 - lam
        a[i, i1] += lam
    return a


def bilinear_upsample(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the two trailing axes (align_corners=False)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size must be >= 1, got {(out_h, out_w)}")
    ah = interp_matrix(x.shape[-2], out_h, x.dtype)
    aw = interp_matrix(x.shape[-1], out_w, x.dtype)
    return np.matmul(np.matmul(ah, x), aw.T)


def bilinear_upsample_backward(g: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    ah = interp_matrix(in_h, g.shape[-2], g.dtype)
    aw = interp_matrix(in_w, g.shape[-1], g.dtype)
    return np.matmul(np.matmul(ah.T, g), aw)


def avg_pool2d(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"extents {(h, w)} are not divisible by pool size {k}")
    return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))


# --------------------------------------------------------------------------- pointwise


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return a * b


def concat_channels(tensors: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate along the channel axis, first operand first."""
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != first.ndim or t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ShapeError(f"concat: incompatible shapes {first.shape} and {t.shape}")
    return np.concatenate(tensors, axis=1)
