"""Losses, gradients, a finite-difference checker, and a toy-scale Adam trainer."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .graph import TRAINING, GraphError, ModelGraph
from .models import forward, sdnet_forward, stdnet_forward
from .tensor import ConvDescriptor, ShapeError

log = logging.getLogger(__name__)

EPS = 1e-6
IOU_EPS = 1.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossReport:
    total: float
    bce: float = 0.0
    iou: float = 0.0
    ssim: float = 0.0


@dataclass(frozen=True)
class LossConfig:
    bce: bool = True
    iou: bool = False
    ssim: bool = False
    weighted: bool = True  # class-balanced BCE

    def __post_init__(self):
        if not (self.bce or self.iou or self.ssim):
            raise ValueError("loss config enables no term")


COMBINED = LossConfig(bce=True, iou=True, ssim=True)


# --------------------------------------------------------------------------- losses


def _check_pair(pred: ag.Var, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")


def _per_image(gt: np.ndarray) -> tuple:
    return tuple(range(1, gt.ndim))


def balance_weights(gt: np.ndarray) -> np.ndarray:
    """Per-image class-balance map: positives get |Y-|/|Y|, negatives |Y+|/|Y|."""
    axes = _per_image(gt)
    n = np.prod([gt.shape[a] for a in axes])
    pos = gt.sum(axis=axes, keepdims=True) / n
    return gt * (1.0 - pos) + (1.0 - gt) * pos


def weighted_bce(pred, gt, weighted: bool = True) -> ag.Var:
    pred = ag.as_var(pred)
    gt = np.asarray(gt, dtype=pred.dtype)
    _check_pair(pred, gt)
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth for BCE must be binary (0/1)")
    p = ag.clip(pred, EPS, 1.0 - EPS)
    per_pixel = -(ag.log(p) * gt + ag.log(1.0 - p) * (1.0 - gt))
    if weighted:
        per_pixel = per_pixel * balance_weights(gt).astype(pred.dtype)
    return ag.mean(per_pixel)


def iou_loss(pred, gt) -> ag.Var:
    pred = ag.as_var(pred)
    gt = np.asarray(gt, dtype=pred.dtype)
    _check_pair(pred, gt)
    axes = _per_image(gt)
    inter = ag.total(pred * gt, axis=axes)
    union = ag.total(pred, axis=axes) + gt.sum(axis=axes) - inter
    return ag.mean(1.0 - (inter + IOU_EPS) / (union + IOU_EPS))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _as_frames(x: ag.Var) -> ag.Var:
    return ag.frames_to_batch(x) if x.value.ndim == 5 else x


def ssim_map(x, y) -> ag.Var:
    """Local SSIM with a Gaussian window, zero-padded to keep the input extent."""
    x, y = _as_frames(ag.as_var(x)), _as_frames(ag.as_var(y))
    c = x.shape[1]
    win = np.broadcast_to(gaussian_window(), (c, 1, SSIM_WINDOW, SSIM_WINDOW)).astype(x.dtype)
    desc = ConvDescriptor(padding=SSIM_WINDOW // 2, groups=c)

    def blur(v):
        return ag.conv2d(v, win, None, desc)

    mx, my = blur(x), blur(y)
    sxx = blur(ag.square(x)) - ag.square(mx)
    syy = blur(ag.square(y)) - ag.square(my)
    sxy = blur(x * y) - mx * my
    num = (2.0 * mx * my + C1) * (2.0 * sxy + C2)
    den = (ag.square(mx) + ag.square(my) + C1) * (sxx + syy + C2)
    return num / den


def ssim_loss(pred, gt) -> ag.Var:
    pred = ag.as_var(pred)
    gt = np.asarray(gt, dtype=pred.dtype)
    _check_pair(pred, gt)
    return 1.0 - ag.mean(ssim_map(pred, gt))


def compute_loss(pred, gt, cfg: LossConfig = LossConfig()) -> tuple[ag.Var, LossReport]:
    terms = {}
    if cfg.bce:
        terms["bce"] = weighted_bce(pred, gt, cfg.weighted)
    if cfg.iou:
        terms["iou"] = iou_loss(pred, gt)
    if cfg.ssim:
        terms["ssim"] = ssim_loss(pred, gt)
    total = None
    for v in terms.values():
        total = v if total is None else total + v
    report = LossReport(float(total.value), **{k: float(v.value) for k, v in terms.items()})
    return total, report


# --------------------------------------------------------------------------- gradients


def _model_output(graph: ModelGraph, x, params, temporal: bool):
    if graph.config.arch == "stdnet":
        return stdnet_forward(graph, x, params, temporal=temporal)
    return sdnet_forward(graph, x, params)


def backward(graph: ModelGraph, x: np.ndarray, gt: np.ndarray, cfg: LossConfig = LossConfig(),
             temporal: bool = True) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Loss report and d(loss)/d(param) for every parameter of a training-form graph."""
    if graph.form != TRAINING:
        raise GraphError("gradients need a training-form model; inference-form weights are fused")
    params = {k: ag.Var(v, requires_grad=True, name=k) for k, v in graph.params.items()}
    pred = _model_output(graph, x, params, temporal)
    loss, report = compute_loss(pred, gt, cfg)
    loss.backward()
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in params.items()}
    return report, grads


def evaluate_loss(graph: ModelGraph, x: np.ndarray, gt: np.ndarray, cfg: LossConfig = LossConfig(),
                  temporal: bool = True) -> LossReport:
    with ag.no_grad():
        if graph.form == TRAINING:
            pred = _model_output(graph, x, None, temporal)
        else:
            pred = forward(graph, x)
        return compute_loss(pred, gt, cfg)[1]


def check_gradients(fn: Callable[[dict], ag.Var], inputs: dict[str, np.ndarray], h: float = 1e-4,
                    max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Compare analytic gradients of scalar ``fn`` against central differences.

    Returns, per input, ``max|analytic - numeric| / max(max|numeric|, 1e-8)``
    over the checked entries (all of them, or ``max_entries`` sampled ones).
    """
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    vars_ = {k: ag.Var(v, requires_grad=True) for k, v in inputs.items()}
    out = fn(vars_)
    if out.value.size != 1:
        raise ShapeError("gradient check needs a scalar function")
    out.backward()
    rng = np.random.default_rng(seed)
    errors = {}
    for name, arr in inputs.items():
        analytic = vars_[name].grad if vars_[name].grad is not None else np.zeros_like(arr)
        flat = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat = rng.choice(arr.size, max_entries, replace=False)
        numeric = np.empty(len(flat))
        for j, i in enumerate(flat):
            idx = np.unravel_index(i, arr.shape)
            orig = arr[idx]
            vals = []
            for delta in (h, -h):
                arr[idx] = orig + delta
                with ag.no_grad():
                    vals.append(float(fn({k: ag.Var(v) for k, v in inputs.items()}).value))
            arr[idx] = orig
            numeric[j] = (vals[0] - vals[1]) / (2 * h)
        a = analytic.reshape(-1)[flat]
        errors[name] = float(np.abs(a - numeric).max() / max(np.abs(numeric).max(), 1e-8))
    return errors


# --------------------------------------------------------------------------- optimisation


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
             scales: dict[str, float] | None = None) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            rate = lr * (scales or {}).get(k, 1.0)
            if rate:
                params[k] = params[k] - (rate * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


def step_lr(base: float, step: int, milestones: Sequence[int] = (), gamma: float = 0.1) -> float:
    return base * gamma ** sum(step >= m for m in milestones)


def lr_scales(names, prefix_scale: dict[str, float] | None) -> dict[str, float]:
    out = {}
    for n in names:
        for prefix, s in (prefix_scale or {}).items():
            if n.startswith(prefix):
                out[n] = s
    return out


@dataclass
class TrainResult:
    graph: ModelGraph
    reports: list[LossReport] = field(default_factory=list)

    @property
    def curve(self) -> list[float]:
        return [r.total for r in self.reports]


def train_toy(graph: ModelGraph, inputs: np.ndarray, targets: np.ndarray, steps: int, lr: float = 1e-3,
              milestones: Sequence[int] = (), gamma: float = 0.1, loss: LossConfig = LossConfig(),
              lr_scale: dict[str, float] | None = None, temporal: bool = True, batch_size: int | None = None,
              seed: int = 0, optimizer: Adam | None = None) -> TrainResult:
    """Adam on a tiny dataset; each step reports the loss before its update.

    With ``batch_size=None`` every step is one full-batch epoch. Smaller
    batches are drawn by a generator seeded with ``seed``.
    """
    inputs, targets = np.asarray(inputs), np.asarray(targets)
    if len(inputs) == 0:
        raise ValueError("training dataset is empty")
    if len(inputs) != len(targets):
        raise ShapeError(f"{len(inputs)} inputs but {len(targets)} targets")
    if graph.form != TRAINING:
        raise GraphError("only training-form models can be trained")
    graph = graph.copy()
    dtype = next(iter(graph.params.values())).dtype
    inputs, targets = inputs.astype(dtype), targets.astype(dtype)
    opt = optimizer or Adam()
    scales = lr_scales(graph.params, lr_scale)
    rng = np.random.default_rng(seed)
    result = TrainResult(graph)
    n = len(inputs)
    for step in range(steps):
        if batch_size is None or batch_size >= n:
            idx = slice(None)
        else:
            idx = np.sort(rng.choice(n, batch_size, replace=False))
        report, grads = backward(graph, inputs[idx], targets[idx], loss, temporal)
        result.reports.append(report)
        opt.step(graph.params, grads, step_lr(lr, step, milestones, gamma), scales)
        if step % 50 == 0 or step == steps - 1:
            log.info("step %d loss %.6f", step, report.total)
    return result


def train_two_stage(graph: ModelGraph, clips: np.ndarray, targets: np.ndarray, steps: tuple[int, int],
                    lr: float = 1e-3, backbone_scale: float = 0.01, loss: LossConfig = COMBINED,
                    seed: int = 0) -> tuple[TrainResult, TrainResult]:
    """Clip-model protocol: train with the temporal branch off, then fine-tune it on with a slowed backbone."""
    if graph.config.arch != "stdnet":
        raise GraphError("two-stage training applies to the clip model")
    first = train_toy(graph, clips, targets, steps[0], lr, loss=loss, temporal=False, seed=seed)
    second = train_toy(first.graph, clips, targets, steps[1], lr, loss=loss, temporal=True, seed=seed,
                       lr_scale={"b": backbone_scale})
    return first, second


# --------------------------------------------------------------------------- toy data


def square_dataset(n: int = 4, size: int = 64, seed: int = 0, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Bright squares on a dark noisy field: images (n, 3, s, s) and masks (n, 1, s, s)."""
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 0.2, size=(n, 3, size, size))
    masks = np.zeros((n, 1, size, size))
    for i in range(n):
        side = int(rng.integers(size // 4, size // 2 + 1))
        y, x = rng.integers(0, size - side + 1, size=2)
        masks[i, 0, y:y + side, x:x + side] = 1.0
        images[i, :, y:y + side, x:x + side] = rng.uniform(0.7, 1.0, size=(3, side, side))
    return images.astype(dtype), masks.astype(dtype)


def boring_clip(images: np.ndarray, frames: int = 8) -> np.ndarray:
    """Repeat each (N, C, H, W) image along a new time axis: (N, C, T, H, W)."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) images, got {images.shape}")
    return np.repeat(images[:, :, None], frames, axis=2)
