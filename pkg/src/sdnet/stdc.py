"""Spatiotemporal difference convolutions on W-T and H-T planes, and LBP-TOP codes.

A plane kernel reuses the 3x3 pair tables of the 2-D operators: the grid's
row offset becomes a time offset and the column offset moves along W (for the
W-T plane) or H (for the H-T plane).
"""
from __future__ import annotations

from enum import Enum

import numpy as np

from .diffconv import PdcKind, pair_sum, pair_sum_backward, pair_table, pdc_to_standard_kernel
from .tensor import ConvDescriptor, ShapeError, _plane_axis, conv_output_size, pad, pad_backward


class StdcKind(str, Enum):
    CSTDC = "cstdc"
    ASTDC = "astdc"
    STANDARD = "conv"


_AS_PDC = {StdcKind.CSTDC: PdcKind.CPDC, StdcKind.ASTDC: PdcKind.APDC}


def _pdc_kind(kind) -> PdcKind:
    kind = StdcKind(kind)
    if kind is StdcKind.STANDARD:
        raise ValueError("standard plane kernels need no transform")
    return _AS_PDC[kind]


def to_plane(offset2d, plane: str) -> tuple[int, int, int]:
    """Map a (row, col) grid offset to (dt, dh, dw)."""
    dt, ds = offset2d
    return (dt, 0, ds) if _plane_axis(plane) == 3 else (dt, ds, 0)


def plane_extents(plane: str, k: int = 3) -> tuple[int, int, int]:
    return (k, 1, k) if _plane_axis(plane) == 3 else (k, k, 1)


def plane_desc(plane: str, stride=1, groups: int = 1) -> ConvDescriptor:
    """Same-size descriptor for a 3x3 plane kernel: replicate on T, zero in space."""
    padding = (1, 0, 1) if _plane_axis(plane) == 3 else (1, 1, 0)
    return ConvDescriptor(stride=stride, padding=padding, groups=groups,
                          pad_mode=("replicate", "zero", "zero"), ndim=3)


def grid_to_plane(kernel: np.ndarray, plane: str) -> np.ndarray:
    """Reshape (..., kt, ks) onto the plane axes as (..., kt, kh, kw)."""
    axis = 3 if _plane_axis(plane) == 3 else 4
    return np.expand_dims(kernel, axis=kernel.ndim - 1 if axis == 3 else kernel.ndim)


def plane_to_grid(kernel: np.ndarray, plane: str) -> np.ndarray:
    return kernel[..., 0, :] if _plane_axis(plane) == 3 else kernel[..., :, 0]


def stdc_to_standard_plane_kernel(weights: np.ndarray, kind: StdcKind | str, plane: str) -> np.ndarray:
    """Plane kernel (out, in, 3, 1, 3) or (out, in, 3, 3, 1) equivalent to an STDC branch."""
    return grid_to_plane(pdc_to_standard_kernel(weights, _pdc_kind(kind)), plane)


def _setup(clip, weights, bias, kind, plane, desc):
    pdc_kind = _pdc_kind(kind)
    if clip.ndim != 5:
        raise ShapeError(f"expected an (N, C, T, H, W) clip, got rank {clip.ndim}")
    if weights.shape[-2:] != (3, 3) or weights.ndim != 4:
        raise ShapeError(f"STDC weights must be (out, in/groups, 3, 3), got {weights.shape}")
    if desc is None:
        desc = plane_desc(plane)
    if desc.ndim != 3:
        raise ShapeError("STDC needs a 3-D descriptor")
    n, c = clip.shape[:2]
    o, cg = weights.shape[:2]
    if cg * desc.groups != c or o % desc.groups:
        raise ShapeError(f"channel axis mismatch: clip has {c} channels, weights expect {cg * desc.groups}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias must have shape ({o},), got {bias.shape}")
    ks = plane_extents(plane)
    out = tuple(conv_output_size(s, k, st, p, d)
                for s, k, st, p, d in zip(clip.shape[2:], ks, desc.stride, desc.padding, desc.dilation))
    if min(out) < 1:
        raise ShapeError(f"clip extents {clip.shape[2:]} too small for plane kernel {ks}")
    centre = tuple(k // 2 for k in ks)
    taps = []
    for e in pair_table(pdc_kind):
        a = tuple(o_ + c_ for o_, c_ in zip(to_plane(e.a, plane), centre))
        b = tuple(o_ + c_ for o_, c_ in zip(to_plane(e.b, plane), centre))
        taps.append((a, b, e.weight_index))
    return desc, taps, out


def stdc_direct(clip: np.ndarray, weights: np.ndarray, bias: np.ndarray | None, kind: StdcKind | str,
                plane: str, desc: ConvDescriptor | None = None) -> np.ndarray:
    """Pair-sum evaluation of a central or angular STDC on one plane."""
    desc, taps, out = _setup(clip, weights, bias, kind, plane, desc)
    xp = pad(clip, desc.padding, desc.pad_mode)
    y = pair_sum(xp, weights.reshape(*weights.shape[:2], 9), taps, out, desc.stride, desc.dilation, desc.groups)
    if bias is not None:
        y += bias.reshape(1, -1, 1, 1, 1)
    return y


def stdc_direct_backward(clip, weights, kind, plane, gout, desc=None):
    desc, taps, _ = _setup(clip, weights, None, kind, plane, desc)
    xp = pad(clip, desc.padding, desc.pad_mode)
    gxp, gw = pair_sum_backward(xp, weights.reshape(*weights.shape[:2], 9), taps, gout,
                                desc.stride, desc.dilation, desc.groups)
    gx = pad_backward(gxp, desc.padding, desc.pad_mode)
    return gx, gw.reshape(weights.shape), gout.sum(axis=(0, 2, 3, 4))


def lbp_top_code(clip: np.ndarray, plane: str, p: int = 8) -> np.ndarray:
    """8-neighbour LBP code of every interior centre on one plane.

    Neighbours are visited in row-major grid order (time, then space) with the
    centre skipped; a neighbour contributes its bit when ``g_i >= g_c``.
    Returns integers shaped (N, C, T-2, H, W-2) for W-T or (N, C, T-2, H-2, W) for H-T.
    """
    if p != 8:
        raise ValueError(f"only the 8-neighbour ring is supported, got p={p}")
    if clip.ndim != 5:
        raise ShapeError(f"expected an (N, C, T, H, W) clip, got rank {clip.ndim}")
    ks = plane_extents(plane)
    t, h, w = clip.shape[2:]
    out = (t - ks[0] + 1, h - ks[1] + 1, w - ks[2] + 1)
    if min(out) < 1:
        raise ShapeError(f"clip extents {(t, h, w)} too small for an LBP ring on plane {plane}")

    def view(off):
        dt, dh, dw = off
        return clip[:, :, 1 + dt:1 + dt + out[0],
                    ks[1] // 2 + dh:ks[1] // 2 + dh + out[1],
                    ks[2] // 2 + dw:ks[2] // 2 + dw + out[2]]

    centre = view((0, 0, 0))
    code = np.zeros(centre.shape, dtype=np.int64)
    bit = 0
    for dt in (-1, 0, 1):
        for ds in (-1, 0, 1):
            if (dt, ds) == (0, 0):
                continue
            code += (view(to_plane((dt, ds), plane)) >= centre).astype(np.int64) << bit
            bit += 1
    return code
