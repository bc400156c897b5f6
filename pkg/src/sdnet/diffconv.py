"""Pixel-difference convolutions (CPDC, APDC, RPDC).

Each variant is a table of pixel pairs over a 3x3 weight grid. ``pdc_direct``
evaluates the pair sums literally; ``pdc_to_standard_kernel`` folds the same
table into an ordinary kernel so the layer can run as a plain convolution.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .tensor import ConvDescriptor, ShapeError, conv_output_size, make_desc, pad, pad_backward


class PdcKind(str, Enum):
    CPDC = "cpdc"
    APDC = "apdc"
    RPDC = "rpdc"
    STANDARD = "conv"


@dataclass(frozen=True)
class PairEntry:
    a: tuple[int, int]
    b: tuple[int, int]
    weight_index: int


@dataclass(frozen=True)
class PairTable:
    entries: tuple[PairEntry, ...]
    source: int
    target: int

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
# outer ring, clockwise from the top-left cell
RING = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)]


def grid_index(offset: tuple[int, int]) -> int:
    return (offset[0] + 1) * 3 + (offset[1] + 1)


def pair_table(kind: PdcKind | str, grid: int = 3) -> PairTable:
    kind = PdcKind(kind)
    if kind is PdcKind.STANDARD:
        raise ValueError("standard convolution has no pair table")
    if grid != 3:
        raise ShapeError(f"pair tables are defined on a 3x3 grid, got {grid}x{grid}")
    if kind is PdcKind.CPDC:
        entries = [PairEntry(o, (0, 0), grid_index(o)) for o in OFFSETS]
        return PairTable(tuple(entries), 3, 3)
    if kind is PdcKind.APDC:
        entries = [PairEntry(RING[k], RING[(k + 1) % 8], grid_index(RING[k])) for k in range(8)]
        return PairTable(tuple(entries), 3, 3)
    entries = [PairEntry((2 * dy, 2 * dx), (dy, dx), grid_index((dy, dx))) for dy, dx in OFFSETS if (dy, dx) != (0, 0)]
    return PairTable(tuple(entries), 3, 5)


def kernel_extent(kind: PdcKind | str) -> int:
    """Extent of the standard kernel a 3x3 branch of this kind becomes."""
    return 5 if PdcKind(kind) is PdcKind.RPDC else 3


def _check_weights(weights: np.ndarray):
    if weights.shape[-2:] != (3, 3):
        raise ShapeError(f"difference-convolution weights need a trailing 3x3 grid, got {weights.shape}")


def pdc_to_standard_kernel(weights: np.ndarray, kind: PdcKind | str) -> np.ndarray:
    """Accumulate +w at ``a`` and -w at ``b`` for every pair into a zero kernel."""
    kind = PdcKind(kind)
    if kind is PdcKind.STANDARD:
        raise ValueError("standard kernels need no transform")
    _check_weights(weights)
    table = pair_table(kind)
    k = table.target
    c = k // 2
    flat = weights.reshape(*weights.shape[:-2], 9)
    out = np.zeros(weights.shape[:-2] + (k, k), dtype=weights.dtype)
    for e in table:
        w = flat[..., e.weight_index]
        out[..., e.a[0] + c, e.a[1] + c] += w
        out[..., e.b[0] + c, e.b[1] + c] -= w
    return out


def pdc_to_standard_kernel_adjoint(gkernel: np.ndarray, kind: PdcKind | str) -> np.ndarray:
    """Transpose of the (linear) kernel transform; maps kernel grads to weight grads."""
    table = pair_table(kind)
    c = table.target // 2
    g = np.zeros(gkernel.shape[:-2] + (9,), dtype=gkernel.dtype)
    for e in table:
        g[..., e.weight_index] += gkernel[..., e.a[0] + c, e.a[1] + c] - gkernel[..., e.b[0] + c, e.b[1] + c]
    return g.reshape(gkernel.shape[:-2] + (3, 3))


# --------------------------------------------------------------------------- pair-sum engine


def _taps(entries, center: Sequence[int]):
    """Convert pair offsets to window positions relative to the padded origin."""
    return [(tuple(o + c for o, c in zip(a, center)), tuple(o + c for o, c in zip(b, center)), wi)
            for a, b, wi in entries]


def _slice(xg, pos, out, stride, dilation):
    idx = [Ellipsis]
    for p, o, s, d in zip(pos, out, stride, dilation):
        idx.append(slice(p * d, p * d + s * (o - 1) + 1, s))
    return tuple(idx)


def pair_sum(xp: np.ndarray, weights: np.ndarray, taps, out: Sequence[int],
             stride: Sequence[int], dilation: Sequence[int], groups: int) -> np.ndarray:
    """Sum over pairs of ``w[wi] * (x[a] - x[b])`` on an already padded tensor.

    ``xp`` is (N, C, *S); ``weights`` is (O, C/groups, n_weights); ``taps``
    holds ``(pos_a, pos_b, weight_index)`` in padded window coordinates.
    """
    n, c = xp.shape[:2]
    o, cg = weights.shape[:2]
    og = o // groups
    xg = xp.reshape(n, groups, cg, *xp.shape[2:])
    wg = weights.reshape(groups, og, cg, -1)
    size = int(np.prod(out))
    y = np.zeros((n, groups, og, size), dtype=np.result_type(xp, weights))
    depthwise = cg == 1 and og == 1
    for pa, pb, wi in taps:
        diff = (xg[_slice(xg, pa, out, stride, dilation)] - xg[_slice(xg, pb, out, stride, dilation)])
        diff = diff.reshape(n, groups, cg, size)
        if depthwise:
            y += wg[None, :, :, 0, wi, None] * diff
        else:
            y += np.matmul(wg[:, :, :, wi], diff)
    return y.reshape(n, o, *out)


def pair_sum_backward(xp, weights, taps, gout, stride, dilation, groups):
    n, c = xp.shape[:2]
    o, cg = weights.shape[:2]
    og = o // groups
    out = gout.shape[2:]
    size = int(np.prod(out))
    xg = xp.reshape(n, groups, cg, *xp.shape[2:])
    wg = weights.reshape(groups, og, cg, -1)
    go = gout.reshape(n, groups, og, size)
    gxp = np.zeros(xg.shape, dtype=np.result_type(xp, gout))
    gw = np.zeros(wg.shape, dtype=np.result_type(weights, gout))
    depthwise = cg == 1 and og == 1
    for pa, pb, wi in taps:
        sa = _slice(xg, pa, out, stride, dilation)
        sb = _slice(xg, pb, out, stride, dilation)
        diff = (xg[sa] - xg[sb]).reshape(n, groups, cg, size)
        if depthwise:
            gw[:, 0, 0, wi] += np.einsum("ngp,ngp->g", go[:, :, 0], diff[:, :, 0])
            gd = wg[None, :, :, 0, wi, None] * go
        else:
            gw[:, :, :, wi] += np.matmul(go, diff.transpose(0, 1, 3, 2)).sum(axis=0)
            gd = np.matmul(wg[:, :, :, wi].transpose(0, 2, 1), go)
        gd = gd.reshape(gxp[sa].shape)
        gxp[sa] += gd
        gxp[sb] -= gd
    return gxp.reshape(xp.shape), gw.reshape(weights.shape)


# --------------------------------------------------------------------------- pdc_direct


def _pdc_setup(x, weights, bias, kind, desc):
    kind = PdcKind(kind)
    if kind is PdcKind.STANDARD:
        raise ValueError("pdc_direct needs a difference kind, not standard")
    _check_weights(weights)
    if x.ndim != 4:
        raise ShapeError(f"pdc_direct expects an (N, C, H, W) image, got rank {x.ndim}")
    n, c, h, w = x.shape
    o, cg = weights.shape[:2]
    g = desc.groups
    if c % g or o % g or cg * g != c:
        raise ShapeError(f"channel axis mismatch: input {c} channels, weights {cg} per group, groups={g}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias must have shape ({o},), got {bias.shape}")
    table = pair_table(kind)
    k = table.target
    out = tuple(conv_output_size(s, k, st, p, d)
                for s, st, p, d in zip((h, w), desc.stride, desc.padding, desc.dilation))
    if min(out) < 1:
        raise ShapeError(f"input {(h, w)} too small for a {k}x{k} {kind.value} window")
    taps = _taps([(e.a, e.b, e.weight_index) for e in table], (k // 2, k // 2))
    return taps, out


def pdc_direct(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None, kind: PdcKind | str,
               desc: ConvDescriptor | None = None, **kw) -> np.ndarray:
    """Evaluate a pixel-difference convolution pair by pair.

    The descriptor's dilation scales the pair offsets on the transformed grid,
    so this agrees with ``conv2d(x, pdc_to_standard_kernel(weights, kind))``
    under the same descriptor.
    """
    desc = make_desc(desc, 2, **kw)
    taps, out = _pdc_setup(x, weights, bias, kind, desc)
    xp = pad(x, desc.padding, desc.pad_mode)
    flat = weights.reshape(*weights.shape[:2], 9)
    y = pair_sum(xp, flat, taps, out, desc.stride, desc.dilation, desc.groups)
    if bias is not None:
        y += bias.reshape(1, -1, 1, 1)
    return y


def pdc_direct_backward(x, weights, kind, gout, desc: ConvDescriptor | None = None, **kw):
    desc = make_desc(desc, 2, **kw)
    taps, _ = _pdc_setup(x, weights, None, kind, desc)
    xp = pad(x, desc.padding, desc.pad_mode)
    flat = weights.reshape(*weights.shape[:2], 9)
    gxp, gw = pair_sum_backward(xp, flat, taps, gout, desc.stride, desc.dilation, desc.groups)
    gx = pad_backward(gxp, desc.padding, desc.pad_mode)
    return gx, gw.reshape(weights.shape), gout.sum(axis=(0, 2, 3))


def same_padding(kind: PdcKind | str, dilation: int = 1) -> int:
    return dilation * (kernel_extent(kind) - 1) // 2


__all__ = [
    "PdcKind", "PairEntry", "PairTable", "pair_table", "kernel_extent", "pdc_direct",
    "pdc_direct_backward", "pdc_to_standard_kernel", "pdc_to_standard_kernel_adjoint",
    "same_padding", "pair_sum", "pair_sum_backward",
]
