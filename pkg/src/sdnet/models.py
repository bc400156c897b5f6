"""SDNet (images) and STDNet (clips) graphs and their forward passes.

Backbone: layer 1 is a full 3x3 multi-branch conv; layers 2..16 are
depthwise-separable blocks whose depthwise conv carries the difference
branches. Stage outputs feed a compact decoder (CDCM reduce + dilated convs,
CSAM gating), a top-down refinement, and a sigmoid saliency head.
"""
from __future__ import annotations

import contextlib
import math
import warnings
from dataclasses import replace

import numpy as np

from . import autograd as ag
from .diffconv import same_padding
from .graph import INFERENCE, TRAINING, GraphError, LayerSpec, ModelConfig, ModelGraph
from .stdc import plane_desc, plane_extents
from .tensor import ConvDescriptor, ShapeError

Params = dict
_observer = None


# --------------------------------------------------------------------------- graph construction


def _stride_layers(config: ModelConfig) -> set[int]:
    """1-based backbone layers that downsample: the first layer of every stage but layer 1 itself."""
    n = config.layers_per_stage
    return {2} | {s * n + 1 for s in range(1, len(config.widths))}


def backbone_layers(config: ModelConfig) -> list[LayerSpec]:
    n = config.layers_per_stage
    strides = _stride_layers(config)
    specs = []
    cin, scale = config.in_channels, 1
    for idx in range(1, n * len(config.widths) + 1):
        stage = (idx - 1) // n
        width = config.widths[stage]
        kinds = config.last_branches if idx % n == 0 else config.branches
        stride = 2 if idx in strides else 1
        scale *= stride
        name = f"b{idx:02d}"
        if idx == 1:
            specs.append(LayerSpec(name, cin, width, 3, stride, branches=kinds, activation="relu", scale=scale))
        else:
            specs.append(LayerSpec(f"{name}.dw", cin, cin, 3, stride, groups=cin, branches=kinds,
                                   activation="relu", scale=scale))
            specs.append(LayerSpec(f"{name}.pw", cin, width, 1, bias=True, activation="relu",
                                   shortcut=stride == 1 and cin == width, scale=scale))
        cin = width
    return specs


def stage_scales(config: ModelConfig) -> list[int]:
    specs = {s.name: s for s in backbone_layers(config)}
    n = config.layers_per_stage
    out = []
    for stage in range(len(config.widths)):
        last = (stage + 1) * n
        out.append(specs["b01" if last == 1 else f"b{last:02d}.pw"].scale)
    return out


def _cdcm_layers(prefix: str, cin: int, config: ModelConfig, scale: int, tag: str = "dil") -> list[LayerSpec]:
    d = config.decoder_width
    specs = [LayerSpec(f"{prefix}.reduce", cin, d, 1, bias=True, scale=scale)] if tag == "dil" else []
    specs += [LayerSpec(f"{prefix}.{tag}{i}", d, d, 3, dilation=dil, scale=scale)
              for i, dil in enumerate(config.dilations)]
    return specs


def _csam_layers(prefix: str, cin: int, config: ModelConfig, scale: int) -> list[LayerSpec]:
    a = config.attention_width
    return [LayerSpec(f"{prefix}.att1", cin, a, 1, bias=True, scale=scale),
            LayerSpec(f"{prefix}.att2", a, 1, 3, scale=scale)]


def build_sdnet(config: ModelConfig | None = None, seed: int = 0, dtype=np.float32, init: bool = True) -> ModelGraph:
    """Training-form SDNet with freshly initialised weights."""
    config = config or ModelConfig()
    if config.arch != "sdnet":
        config = ModelConfig.from_dict({**config.to_dict(), "arch": "sdnet"})
    if config.decoder_width > min(config.widths):
        warnings.warn(f"decoder width {config.decoder_width} exceeds a stage width {min(config.widths)}")
    specs = backbone_layers(config)
    scales = stage_scales(config)
    d = config.decoder_width
    for k, (width, scale) in enumerate(zip(config.widths, scales), start=1):
        specs += _cdcm_layers(f"d{k}", width, config, scale)
        specs += _csam_layers(f"d{k}", d, config, scale)
    for k in range(1, len(config.widths)):
        specs.append(LayerSpec(f"t{k}", 2 * d, d, 3, scale=scales[k - 1]))
    specs.append(LayerSpec("head", d, 1, 1, bias=True, scale=scales[0]))
    graph = ModelGraph(config, TRAINING, {s.name: s for s in specs})
    if init:
        graph.params = init_params(graph, seed, dtype)
    return graph


def build_stdnet(config: ModelConfig | None = None, seed: int = 0, dtype=np.float32, init: bool = True) -> ModelGraph:
    """Training-form STDNet: SDNet backbone per frame, CDCM || STDM side modules per stage."""
    config = config or ModelConfig(arch="stdnet")
    if config.arch != "stdnet":
        config = ModelConfig.from_dict({**config.to_dict(), "arch": "stdnet"})
    specs = backbone_layers(config)
    scales = stage_scales(config)
    d = config.decoder_width
    n_stages = len(config.widths)
    for k, (width, scale) in enumerate(zip(config.widths, scales), start=1):
        cin = width + (2 * d if k < n_stages else 0)
        specs += _cdcm_layers(f"d{k}", cin, config, scale)
        if config.temporal == "stdm":
            specs += [LayerSpec(f"d{k}.{plane}", d, d, 3, branches=config.temporal_branches, plane=plane,
                                activation="relu", scale=scale) for plane in ("wt", "ht")]
        elif config.temporal == "cdcm":
            specs += _cdcm_layers(f"d{k}", cin, config, scale, tag="tdil")
        specs += _csam_layers(f"d{k}", 2 * d, config, scale)
    specs.append(LayerSpec("head", 2 * d, 1, 1, bias=True, scale=scales[0]))
    graph = ModelGraph(config, TRAINING, {s.name: s for s in specs})
    if init:
        graph.params = init_params(graph, seed, dtype)
    return graph


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32, init: bool = True) -> ModelGraph:
    build = build_sdnet if config.arch == "sdnet" else build_stdnet
    return build(config, seed, dtype, init)


def init_params(graph: ModelGraph, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Uniform(+-sqrt(6 / fan_in)) kernels, zero biases, zero raw branch coefficients."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in graph.param_shapes().items():
        if name.endswith(".alpha") or name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def rebuild(config: ModelConfig, form: str) -> ModelGraph:
    """Empty-parameter graph for a config and form (used when loading archives)."""
    graph = build_model(config, init=False)
    if form == INFERENCE:
        graph.layers = {name: replace(spec, kernel=spec.fused_extent, branches=("conv",)) if spec.multi_branch
                        else spec for name, spec in graph.layers.items()}
    elif form != TRAINING:
        raise GraphError(f"unknown form {form!r}")
    graph.form = form
    return graph


# --------------------------------------------------------------------------- layer application


def _params(graph: ModelGraph, params: Params | None) -> Params:
    if params is not None:
        return params
    return {k: ag.Var(v) for k, v in graph.params.items()}


def conv_desc(spec: LayerSpec, extent: int | None = None) -> ConvDescriptor:
    return ConvDescriptor(stride=spec.stride, padding=spec.padding(extent), dilation=spec.dilation,
                          groups=spec.groups)


def _plane_desc(spec: LayerSpec) -> ConvDescriptor:
    desc = plane_desc(spec.plane, stride=1, groups=spec.groups)
    if spec.kernel != 3 and not spec.multi_branch:
        pad = spec.kernel // 2
        padding = (pad, 0, pad) if spec.plane == "wt" else (pad, pad, 0)
        desc = ConvDescriptor(padding=padding, groups=spec.groups, pad_mode=desc.pad_mode, ndim=3)
    return desc


def branch_output(spec: LayerSpec, kind: str, w, x):
    """Output of one branch of a layer (no coefficient)."""
    if spec.plane is not None:
        desc = _plane_desc(spec)
        if kind == "conv":
            kt, kh, kw = plane_extents(spec.plane)
            return ag.conv_plane3d(x, ag.reshape(w, w.shape[:2] + (kt, kh, kw)), None, desc, spec.plane)
        return ag.stdc_direct(x, w, None, kind, spec.plane, desc)
    if kind == "conv":
        return ag.conv2d(x, w, None, conv_desc(spec, 3 if spec.multi_branch else None))
    return ag.pdc_direct(x, w, None, kind, conv_desc(spec, 5 if kind == "rpdc" else 3))


def apply_layer(graph: ModelGraph, params: Params, name: str, x):
    """Raw (pre-activation) output of one conv layer in either form."""
    spec = graph.layer(name)
    if _observer is not None:
        _observer(spec, params, x)
    bias = params.get(f"{name}.bias")
    if not spec.multi_branch:
        w = params[f"{name}.weight"]
        if spec.plane is not None:
            y = ag.conv_plane3d(x, w, bias, _plane_desc(spec), spec.plane)
        else:
            y = ag.conv2d(x, w, bias, conv_desc(spec))
        return y
    alpha = ag.softmax(params[f"{name}.alpha"])
    out = None
    for i, kind in enumerate(spec.branches):
        term = branch_output(spec, kind, params[f"{name}.{kind}"], x) * alpha[i]
        out = term if out is None else out + term
    if bias is not None:
        out = out + ag.reshape(bias, (1, -1) + (1,) * (x.value.ndim - 2))
    return out


def backbone_forward(graph: ModelGraph, params: Params, x) -> list:
    """Stage outputs of the backbone for an (N, C, H, W) batch."""
    config = graph.config
    n = config.layers_per_stage
    feats = []
    for idx in range(1, n * len(config.widths) + 1):
        name = f"b{idx:02d}"
        if idx == 1:
            x = ag.relu(apply_layer(graph, params, name, x))
        else:
            y = ag.relu(apply_layer(graph, params, f"{name}.dw", x))
            y = apply_layer(graph, params, f"{name}.pw", y)
            if graph.layer(f"{name}.pw").shortcut:
                y = y + x
            x = ag.relu(y)
        if idx % n == 0:
            feats.append(x)
    return feats


def _check_extents(x, scales):
    h, w = x.shape[-2:]
    if h < scales[-1] or w < scales[-1]:
        raise ShapeError(f"input {h}x{w} is smaller than the backbone's total stride {scales[-1]}")


# --------------------------------------------------------------------------- decoder


def cdcm_forward(graph: ModelGraph, params: Params, prefix: str, x, tag: str = "dil"):
    """1x1 reduction to the decoder width, then a sum of parallel dilated 3x3 convs."""
    r = apply_layer(graph, params, f"{prefix}.reduce", x) if tag == "dil" else x
    out = None
    for i in range(len(graph.config.dilations)):
        y = apply_layer(graph, params, f"{prefix}.{tag}{i}", r)
        out = y if out is None else out + y
    return out, r


def csam_forward(graph: ModelGraph, params: Params, prefix: str, x):
    """Gate features by a sigmoid spatial attention map (relu -> 1x1 -> 3x3 -> sigmoid)."""
    a = apply_layer(graph, params, f"{prefix}.att1", ag.relu(x))
    a = ag.sigmoid(apply_layer(graph, params, f"{prefix}.att2", a))
    return x * a


def topdown_refine(graph: ModelGraph, params: Params, reduced: list):
    """F_4 = O_4; F_{k-1} = conv3x3(concat(upsample(F_k), O_{k-1}))."""
    f = reduced[-1]
    for k in range(len(reduced) - 1, 0, -1):
        o = reduced[k - 1]
        if o.shape[0] != f.shape[0] or o.shape[1] != f.shape[1]:
            raise ShapeError(f"stage {k} features {o.shape} do not match refined features {f.shape}")
        up = ag.upsample(f, *o.shape[-2:])
        f = apply_layer(graph, params, f"t{k}", ag.concat([up, o]))
    return f


def sdnet_forward(graph: ModelGraph, image, params: Params | None = None, logits: bool = False):
    """Saliency map (N, 1, H, W) in [0, 1] for an (N, 3, H, W) image batch."""
    params = _params(graph, params)
    x = ag.as_var(image)
    if x.value.ndim != 4 or x.shape[1] != graph.config.in_channels:
        raise ShapeError(f"expected (N, {graph.config.in_channels}, H, W) input, got {x.shape}")
    _check_extents(x, stage_scales(graph.config))
    feats = backbone_forward(graph, params, x)
    reduced = []
    for k, f in enumerate(feats, start=1):
        c, _ = cdcm_forward(graph, params, f"d{k}", f)
        reduced.append(csam_forward(graph, params, f"d{k}", c))
    f1 = topdown_refine(graph, params, reduced)
    z = ag.upsample(apply_layer(graph, params, "head", f1), *x.shape[-2:])
    return z if logits else ag.sigmoid(z)


def stdm_forward(graph: ModelGraph, params: Params, prefix: str, r, frames: int):
    """W-T then H-T spatiotemporal layer over per-frame reduced features."""
    clip = ag.batch_to_frames(r, frames)
    clip = ag.relu(apply_layer(graph, params, f"{prefix}.wt", clip))
    clip = ag.relu(apply_layer(graph, params, f"{prefix}.ht", clip))
    return ag.frames_to_batch(clip)


def stdnet_forward(graph: ModelGraph, clip, params: Params | None = None, logits: bool = False,
                   temporal: bool = True):
    """Per-frame saliency (N, 1, T, H, W) for an (N, 3, T, H, W) clip.

    ``temporal=False`` zeroes the spatiotemporal branch (the image-only first
    training stage).
    """
    params = _params(graph, params)
    clip = ag.as_var(clip)
    if clip.value.ndim != 5 or clip.shape[1] != graph.config.in_channels:
        raise ShapeError(f"expected (N, {graph.config.in_channels}, T, H, W) clip, got {clip.shape}")
    n, _, t, h, w = clip.shape
    if t < 1:
        raise ShapeError("clip needs at least one frame")
    frames = ag.frames_to_batch(clip)
    _check_extents(frames, stage_scales(graph.config))
    feats = backbone_forward(graph, params, frames)
    g = None
    mode = graph.config.temporal if temporal else "none"
    for k in range(len(feats), 0, -1):
        f = feats[k - 1]
        inp = f if g is None else ag.concat([f, ag.upsample(g, *f.shape[-2:])])
        c, r = cdcm_forward(graph, params, f"d{k}", inp)
        if mode == "stdm":
            s = stdm_forward(graph, params, f"d{k}", r, t)
        elif mode == "cdcm":
            s, _ = cdcm_forward(graph, params, f"d{k}", r, tag="tdil")
        else:
            s = ag.Var(np.zeros_like(c.value))
        g = csam_forward(graph, params, f"d{k}", ag.concat([c, s]))
    z = ag.upsample(apply_layer(graph, params, "head", g), h, w)
    z = ag.batch_to_frames(z, t)
    return z if logits else ag.sigmoid(z)


def forward(graph: ModelGraph, x, params: Params | None = None, logits: bool = False):
    if graph.config.arch == "sdnet":
        return sdnet_forward(graph, x, params, logits)
    return stdnet_forward(graph, x, params, logits)


def predict(graph: ModelGraph, x: np.ndarray) -> np.ndarray:
    """Forward pass without graph recording; returns a numpy array."""
    with ag.no_grad():
        return forward(graph, x).value


@contextlib.contextmanager
def observe_layers(callback):
    """Call ``callback(spec, params, x)`` with the input of every layer applied inside the block."""
    global _observer
    prev, _observer = _observer, callback
    try:
        yield
    finally:
        _observer = prev


def branch_statistics(graph: ModelGraph, x: np.ndarray) -> list[dict]:
    """Softmaxed coefficients and mean |output| of every branch, per multi-branch layer."""
    if graph.form != TRAINING:
        raise GraphError("branch statistics need a training-form model")
    from .dcr import softmax_coefficients

    records: dict[str, dict] = {}

    def probe(spec, params, inp):
        if not spec.multi_branch or spec.name in records:
            return
        alpha = softmax_coefficients(params[f"{spec.name}.alpha"].value.astype(np.float64))
        means = [float(np.abs(branch_output(spec, k, params[f"{spec.name}.{k}"], inp).value).mean())
                 for k in spec.branches]
        records[spec.name] = {"layer": spec.name, "branches": list(spec.branches),
                              "alpha": alpha.tolist(), "mean_abs": means}

    with observe_layers(probe):
        predict(graph, x)
    return list(records.values())
