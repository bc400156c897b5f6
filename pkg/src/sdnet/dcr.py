"""Difference convolution reparameterization.

A training-form layer sums several branches (standard conv plus pixel- or
spatiotemporal-difference convs), each scaled by a softmaxed coefficient.
Convolution is linear in the kernel, so the whole layer collapses into one
standard kernel: transform each branch, embed it at the largest extent, and
take the coefficient-weighted sum.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .diffconv import PdcKind, pdc_to_standard_kernel
from .graph import INFERENCE, TRAINING, GraphError, LayerSpec, ModelGraph
from .stdc import grid_to_plane, plane_to_grid, stdc_to_standard_plane_kernel
from .tensor import ShapeError

PDC_KINDS = {"cpdc", "apdc", "rpdc"}
STDC_KINDS = {"cstdc", "astdc"}


@dataclass
class BranchSpec:
    kind: str
    weight: np.ndarray
    bias: np.ndarray | None = None
    coeff: float = 0.0
    plane: str | None = None
    stride: int = 1
    groups: int = 1


def softmax_coefficients(raw: Sequence[float]) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64 if not isinstance(raw, np.ndarray) else raw.dtype)
    if raw.size == 0:
        raise ValueError("softmax needs at least one coefficient")
    e = np.exp(raw - raw.max())
    return e / e.sum()


def embed_kernel(kernel: np.ndarray, target: int) -> np.ndarray:
    """Centre a k x k kernel inside a zero target x target kernel."""
    k = kernel.shape[-1]
    if kernel.shape[-2] != k:
        raise ShapeError(f"embed_kernel needs square kernels, got {kernel.shape[-2:]}")
    if target < k or (target - k) % 2:
        raise ShapeError(f"cannot centre a {k}x{k} kernel in {target}x{target}: size difference must be even and >= 0")
    if target == k:
        return kernel
    off = (target - k) // 2
    out = np.zeros(kernel.shape[:-2] + (target, target), dtype=kernel.dtype)
    out[..., off:off + k, off:off + k] = kernel
    return out


def branch_kernel(branch: BranchSpec) -> np.ndarray:
    """Standard-convolution grid kernel of one branch (2-D grid even for plane branches)."""
    w = branch.weight
    if branch.plane is not None and w.ndim == 5:
        w = plane_to_grid(w, branch.plane)
    if branch.kind == "conv":
        return w
    if branch.kind in PDC_KINDS:
        return pdc_to_standard_kernel(w, branch.kind)
    if branch.kind in STDC_KINDS:
        if branch.plane is None:
            raise ValueError(f"{branch.kind} branch needs a plane")
        return plane_to_grid(stdc_to_standard_plane_kernel(w, branch.kind, branch.plane), branch.plane)
    raise ValueError(f"unknown branch kind {branch.kind!r}")


def fuse_branches(branches: Sequence[BranchSpec]) -> tuple[np.ndarray, np.ndarray | None]:
    """Collapse coefficient-weighted branches into one kernel and bias."""
    if not branches:
        raise ValueError("need at least one branch to fuse")
    first = branches[0]
    for b in branches[1:]:
        if b.stride != first.stride or b.groups != first.groups:
            raise ShapeError(f"branches disagree on stride/groups: {b.kind} has ({b.stride}, {b.groups}), "
                             f"{first.kind} has ({first.stride}, {first.groups})")
        if b.weight.shape[:2] != first.weight.shape[:2]:
            raise ShapeError(f"branches disagree on channels: {b.weight.shape[:2]} vs {first.weight.shape[:2]}")
        if b.plane != first.plane:
            raise ShapeError(f"branches disagree on plane: {b.plane} vs {first.plane}")
    alpha = softmax_coefficients(np.array([b.coeff for b in branches], dtype=np.float64))
    kernels = [branch_kernel(b) for b in branches]
    k = max(kern.shape[-1] for kern in kernels)
    dtype = first.weight.dtype
    fused = np.zeros(first.weight.shape[:2] + (k, k), dtype=dtype)
    for a, kern in zip(alpha, kernels):
        fused += dtype.type(a) * embed_kernel(kern, k)
    bias = None
    if any(b.bias is not None for b in branches):
        bias = np.zeros(first.weight.shape[0], dtype=dtype)
        for a, b in zip(alpha, branches):
            if b.bias is not None:
                bias += dtype.type(a) * b.bias
    if first.plane is not None:
        fused = grid_to_plane(fused, first.plane)
    return fused, bias


def layer_branches(spec: LayerSpec, params: dict) -> list[BranchSpec]:
    raw = params[f"{spec.name}.alpha"]
    return [BranchSpec(kind, params[f"{spec.name}.{kind}"], None, float(raw[i]), spec.plane, spec.stride, spec.groups)
            for i, kind in enumerate(spec.branches)]


def convert_layer(spec: LayerSpec, params: dict) -> tuple[LayerSpec, dict]:
    if not spec.multi_branch:
        keep = {k: params[k] for k in spec.param_shapes()}
        return spec, keep
    kernel, bias = fuse_branches(layer_branches(spec, params))
    new = replace(spec, kernel=spec.fused_extent, branches=("conv",))
    out = {f"{spec.name}.weight": kernel}
    if spec.bias:
        out[f"{spec.name}.bias"] = params[f"{spec.name}.bias"]
    return new, out


def convert_model(model: ModelGraph) -> ModelGraph:
    """Fuse every multi-branch layer; topology, activations and shortcuts are untouched."""
    if model.form != TRAINING:
        raise GraphError("model is already in inference form")
    layers, params = {}, {}
    for name, spec in model.layers.items():
        new, p = convert_layer(spec, model.params)
        layers[name] = new
        params.update(p)
    out = ModelGraph(model.config, INFERENCE, layers, params)
    out.validate()
    return out


__all__ = ["BranchSpec", "softmax_coefficients", "embed_kernel", "fuse_branches", "convert_model",
           "convert_layer", "branch_kernel", "layer_branches", "PdcKind"]
