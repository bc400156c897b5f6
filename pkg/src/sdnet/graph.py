"""Declarative model description: configs, per-conv layer specs, and cost accounting."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

import numpy as np

from .diffconv import kernel_extent

TRAINING = "training"
INFERENCE = "inference"
DIFF_KINDS = ("cpdc", "apdc", "rpdc", "cstdc", "astdc")


class GraphError(ValueError):
    """Raised for malformed or mismatched model graphs."""


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "sdnet"
    in_channels: int = 3
    widths: tuple = (60, 120, 240, 240)
    layers_per_stage: int = 4
    branches: tuple = ("conv", "cpdc", "apdc")
    last_branches: tuple = ("conv", "cpdc", "apdc", "rpdc")
    decoder_width: int = 30
    dilations: tuple = (5, 7, 9, 11)
    attention_width: int = 4
    # STDNet only
    temporal: str = "stdm"
    temporal_branches: tuple = ("conv", "cstdc", "astdc")
    clip_len: int = 8

    def __post_init__(self):
        for name in ("widths", "branches", "last_branches", "dilations", "temporal_branches"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.arch not in ("sdnet", "stdnet"):
            raise GraphError(f"unknown architecture {self.arch!r}")
        if len(self.widths) < 1 or any(w < 1 for w in self.widths):
            raise GraphError(f"invalid stage widths {self.widths}")
        if self.layers_per_stage < 1:
            raise GraphError("layers_per_stage must be >= 1")
        if self.decoder_width < 1 or self.attention_width < 1:
            raise GraphError("decoder and attention widths must be >= 1")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise GraphError(f"invalid dilations {self.dilations}")
        for kinds in (self.branches, self.last_branches):
            if not kinds or any(k not in ("conv", "cpdc", "apdc", "rpdc") for k in kinds):
                raise GraphError(f"invalid backbone branch set {kinds}")
        if not self.temporal_branches or any(k not in ("conv", "cstdc", "astdc") for k in self.temporal_branches):
            raise GraphError(f"invalid temporal branch set {self.temporal_branches}")
        if self.temporal not in ("stdm", "cdcm", "none"):
            raise GraphError(f"temporal must be 'stdm', 'cdcm' or 'none', got {self.temporal!r}")
        if self.clip_len < 1:
            raise GraphError("clip_len must be >= 1")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise GraphError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# slim preset used by the toy trainer and fast tests
TOY = dict(widths=(8, 16, 16, 16), decoder_width=8, dilations=(1, 2, 3, 4), attention_width=2)


@dataclass(frozen=True)
class LayerSpec:
    """One convolution of the network, in training or inference form.

    ``kernel`` is the 3x3 grid extent for multi-branch layers and the actual
    (possibly fused, e.g. 5x5) extent for single-kernel layers. ``scale`` is
    the downsampling of the output relative to the network input.
    """

    name: str
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    bias: bool = False
    branches: tuple = ("conv",)
    plane: str | None = None
    activation: str | None = None
    shortcut: bool = False
    scale: int = 1

    @property
    def multi_branch(self) -> bool:
        return self.branches != ("conv",)

    def extent(self, kind: str) -> int:
        """Kernel extent of one branch once written as a standard kernel."""
        if not self.multi_branch:
            return self.kernel
        return kernel_extent(kind) if kind in ("cpdc", "apdc", "rpdc") else 3

    @property
    def fused_extent(self) -> int:
        return max(self.extent(k) for k in self.branches)

    def padding(self, extent: int | None = None) -> int:
        k = self.kernel if extent is None else extent
        return self.dilation * (k - 1) // 2

    def param_shapes(self) -> dict[str, tuple]:
        cin = self.in_channels // self.groups
        shapes = {}
        if self.multi_branch:
            for kind in self.branches:
                shapes[f"{self.name}.{kind}"] = (self.out_channels, cin, 3, 3)
            shapes[f"{self.name}.alpha"] = (len(self.branches),)
        elif self.plane == "wt":
            shapes[f"{self.name}.weight"] = (self.out_channels, cin, self.kernel, 1, self.kernel)
        elif self.plane == "ht":
            shapes[f"{self.name}.weight"] = (self.out_channels, cin, self.kernel, self.kernel, 1)
        else:
            shapes[f"{self.name}.weight"] = (self.out_channels, cin, self.kernel, self.kernel)
        if self.bias:
            shapes[f"{self.name}.bias"] = (self.out_channels,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branches"] = list(self.branches)
        return d


@dataclass
class ModelGraph:
    config: ModelConfig
    form: str
    layers: dict[str, LayerSpec]
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def layer(self, name: str) -> LayerSpec:
        try:
            return self.layers[name]
        except KeyError:
            raise GraphError(f"model has no layer {name!r}") from None

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for spec in self.layers.values():
            shapes.update(spec.param_shapes())
        return shapes

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def validate(self) -> None:
        expected = self.param_shapes()
        missing = [k for k in expected if k not in self.params]
        if missing:
            raise GraphError(f"missing parameter tensor {missing[0]!r}")
        extra = [k for k in self.params if k not in expected]
        if extra:
            raise GraphError(f"unexpected parameter tensor {extra[0]!r}")
        for k, shape in expected.items():
            if tuple(self.params[k].shape) != tuple(shape):
                raise GraphError(f"tensor {k!r} has shape {self.params[k].shape}, expected {shape}")

    def descriptor(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "form": self.form,
            "layers": [s.to_dict() for s in self.layers.values()],
        }

    def astype(self, dtype) -> "ModelGraph":
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "ModelGraph":
        return replace(self, layers=dict(self.layers), params={k: v.copy() for k, v in self.params.items()})


def count_macs_params(graph: ModelGraph, input_dims: Iterable[int]) -> dict:
    """Multiply-accumulate and parameter counts.

    ``input_dims`` is ``(H, W)`` for images or ``(T, H, W)`` for clips; every
    layer of a clip model runs once per frame. Multi-branch layers count every
    branch at its standard-kernel extent.
    """
    dims = tuple(int(d) for d in input_dims)
    if len(dims) == 2:
        frames, (h, w) = 1, dims
    elif len(dims) == 3:
        frames, h, w = dims
    else:
        raise GraphError(f"input dims must be (H, W) or (T, H, W), got {dims}")
    if not graph.layers:
        raise GraphError("graph has no layers to count")
    rows, macs = [], 0
    for spec in graph.layers.values():
        oh, ow = math.ceil(h / spec.scale), math.ceil(w / spec.scale)
        out_elems = frames * spec.out_channels * oh * ow
        cin = spec.in_channels // spec.groups
        layer_macs = 0
        for kind in spec.branches:
            k = spec.extent(kind)
            # plane kernels span (k, 1, k) or (k, k, 1): k*k taps either way
            layer_macs += out_elems * k * k * cin
        params = sum(int(np.prod(s)) for s in spec.param_shapes().values())
        rows.append({"layer": spec.name, "branches": "+".join(spec.branches), "kernel": spec.fused_extent,
                     "out": f"{spec.out_channels}x{oh}x{ow}", "params": params, "macs": layer_macs})
        macs += layer_macs
    params = graph.param_count() if graph.params else sum(r["params"] for r in rows)
    return {"macs": macs, "flops": 2 * macs, "params": params, "layers": rows}
