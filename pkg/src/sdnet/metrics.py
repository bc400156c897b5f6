"""Saliency metrics: MAE, maximum mean F-measure, S-measure."""
from __future__ import annotations

import os
import warnings
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BETA2 = 0.3
THRESHOLDS = np.arange(256) / 255.0
_EPS = np.finfo(np.float64).eps

METRICS = ("mae", "fmax", "smeasure")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).squeeze()
    gt = np.asarray(gt, dtype=np.float64).squeeze()
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred, gt > 0.5


def mae(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.abs(pred - gt).mean())


def f_curve(pred, gt, beta2: float = BETA2) -> np.ndarray:
    """F-beta of ``pred > t`` against ``gt`` for each of the 256 thresholds ``k / 255``."""
    pred, gt = _pair(pred, gt)
    pos = np.sort(pred[gt])
    neg = np.sort(pred[~gt])
    tp = len(pos) - np.searchsorted(pos, THRESHOLDS, side="right")
    fp = len(neg) - np.searchsorted(neg, THRESHOLDS, side="right")
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        recall = tp / max(len(pos), 1)
        den = beta2 * precision + recall
        f = np.where(den > 0, (1 + beta2) * precision * recall / np.where(den > 0, den, 1), 0.0)
    return f


def f_measure_max(preds, gts, beta2: float = BETA2) -> float:
    """Max over thresholds of the dataset-mean per-image F-beta.

    Accepts one (pred, gt) pair or sequences of them. Images whose ground
    truth has no positive pixel are skipped with a warning.
    """
    if isinstance(preds, np.ndarray) and not isinstance(gts, (list, tuple)):
        preds, gts = [preds], [gts]
    curves = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        if not np.any(np.asarray(g) > 0.5):
            warnings.warn(f"image {i} has an empty ground truth; skipped for F-measure")
            continue
        curves.append(f_curve(p, g, beta2))
    if not curves:
        raise ValueError("no image with a non-empty ground truth")
    return float(np.mean(curves, axis=0).max())


# --------------------------------------------------------------------------- S-measure


def _s_object(x: np.ndarray, region: np.ndarray) -> float:
    vals = x[region]
    if vals.size == 0:
        return 0.0
    mu = vals.mean()
    sigma = vals.std(ddof=1) if vals.size > 1 else 0.0
    return float(2 * mu / (mu * mu + 1 + sigma + _EPS))


def s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    fg = pred * gt
    bg = (1 - pred) * (~gt)
    u = gt.mean()
    return u * _s_object(fg, gt) + (1 - u) * _s_object(bg, ~gt)


def centroid(gt: np.ndarray) -> tuple[int, int]:
    """Split point (x, y): one past the rounded foreground centroid, or the image centre."""
    h, w = gt.shape
    if not gt.any():
        return int(np.round(w / 2)), int(np.round(h / 2))
    y, x = np.argwhere(gt).mean(axis=0).round()
    return int(x) + 1, int(y) + 1


def _ssim_block(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    d = max(n - 1, 1)
    sx = ((pred - x) ** 2).sum() / d
    sy = ((gt - y) ** 2).sum() / d
    sxy = ((pred - x) * (gt - y)).sum() / d
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return float(alpha / (beta + _EPS))
    return 1.0 if beta == 0 else 0.0


def s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    x, y = centroid(gt)
    g = gt.astype(np.float64)
    blocks = [(slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
              (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))]
    score = 0.0
    for rs, cs in blocks:
        weight = pred[rs, cs].size / (h * w)
        if weight:
            score += weight * _ssim_block(pred[rs, cs], g[rs, cs])
    return score


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _pair(pred, gt)
    if pred.ndim != 2:
        raise ValueError(f"S-measure needs a single 2-D map, got {pred.shape}")
    y = gt.mean()
    if y == 0:
        score = 1 - pred.mean()
    elif y == 1:
        score = pred.mean()
    else:
        score = alpha * s_object(pred, gt) + (1 - alpha) * s_region(pred, gt)
    return float(np.clip(score, 0.0, 1.0))


# --------------------------------------------------------------------------- datasets


def evaluate(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], metrics: Iterable[str] = METRICS) -> dict:
    metrics = list(metrics)
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise ValueError(f"unknown metric {unknown[0]!r}; choose from {', '.join(METRICS)}")
    if len(preds) != len(gts) or not preds:
        raise ValueError(f"need equal, non-zero numbers of predictions and ground truths "
                         f"({len(preds)} vs {len(gts)})")
    out = {}
    for m in metrics:
        if m == "mae":
            out[m] = float(np.mean([mae(p, g) for p, g in zip(preds, gts)]))
        elif m == "fmax":
            out[m] = f_measure_max(list(preds), list(gts))
        else:
            out[m] = float(np.mean([s_measure(p, g) for p, g in zip(preds, gts)]))
    return out


def paired_files(pred_dir: str | os.PathLike, gt_dir: str | os.PathLike) -> list[tuple[Path, Path]]:
    """Match prediction and ground-truth maps by file stem."""
    suffixes = (".pgm", ".ppm")
    preds = {p.stem: p for p in Path(pred_dir).iterdir() if p.suffix.lower() in suffixes}
    gts = {p.stem: p for p in Path(gt_dir).iterdir() if p.suffix.lower() in suffixes}
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise FileNotFoundError(f"no prediction for ground truth {missing[0]!r}")
    if not gts:
        raise FileNotFoundError(f"no ground-truth maps in {gt_dir}")
    return [(preds[k], gts[k]) for k in sorted(gts)]


def evaluate_dirs(pred_dir, gt_dir, metrics: Iterable[str] = METRICS) -> dict:
    from .io import read_image, read_mask

    pairs = paired_files(pred_dir, gt_dir)
    preds = [read_image(p)[0, 0] for p, _ in pairs]
    gts = [read_mask(g)[0, 0] for _, g in pairs]
    return evaluate(preds, gts, metrics)
