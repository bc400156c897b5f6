"""``sdnet`` command line: init, reparam, infer, infer-video, bench, eval, inspect, train-toy.

CSV goes to stdout, logs to stderr. Exit codes: 0 success, 1 usage,
2 I/O or file format, 3 shape or validation.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .dcr import convert_model
from .graph import INFERENCE, TOY, TRAINING, GraphError, ModelConfig, count_macs_params
from .io import (ArchiveError, NetpbmError, list_frames, load_model, read_clip, read_image, read_mask, save_weights,
                 write_pgm)
from .metrics import METRICS, evaluate_dirs
from .models import branch_statistics, build_model, predict
from .tensor import ShapeError, bilinear_upsample
from .training import COMBINED, LossConfig, boring_clip, square_dataset, train_toy

log = logging.getLogger("sdnet")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INVALID = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _thread_limit(n: int | None):
    if n is None:
        env = os.environ.get("SDNW_THREADS")
        n = int(env) if env else None
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load(path, args, need_form: str | None = None):
    graph = load_model(path)
    if need_form == INFERENCE and graph.form != INFERENCE and not getattr(args, "allow_training_form", False):
        raise GraphError(f"{path} holds a training-form model; run `sdnet reparam` first "
                         "or pass --allow-training-form")
    if need_form == TRAINING and graph.form != TRAINING:
        raise GraphError(f"{path} holds an inference-form model; this command needs the training form")
    return graph.astype(np.float64) if args.f64 else graph


def _resize(x: np.ndarray, h: int, w: int) -> np.ndarray:
    return x if x.shape[-2:] == (h, w) else bilinear_upsample(x, h, w)


def _rgb(img: np.ndarray) -> np.ndarray:
    return np.repeat(img, 3, axis=1) if img.shape[1] == 1 else img


def _writer():
    return csv.writer(sys.stdout, lineterminator="\n")


# --------------------------------------------------------------------------- commands


def cmd_init(args) -> int:
    preset = TOY if args.preset == "toy" else {}
    config = ModelConfig(arch=args.arch, **preset)
    graph = build_model(config, seed=args.seed, dtype=np.float64 if args.f64 else np.float32)
    save_weights(graph, args.out)
    print(f"params: {graph.param_count()}")
    return EXIT_OK


def cmd_reparam(args) -> int:
    graph = _load(args.inp, args, TRAINING)
    fused = convert_model(graph)
    save_weights(fused, args.out)
    print(f"params: {graph.param_count()} → {fused.param_count()}")
    return EXIT_OK


def _infer_image(graph, img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[-2:]
    x = _resize(_rgb(img), size, size) if size else _rgb(img)
    sal = predict(graph, x.astype(next(iter(graph.params.values())).dtype))
    return np.clip(_resize(sal, h, w), 0.0, 1.0)


def cmd_infer(args) -> int:
    graph = _load(args.model, args, INFERENCE)
    if graph.config.arch != "sdnet":
        raise GraphError("infer needs an image model; use infer-video for clip models")
    write_pgm(_infer_image(graph, read_image(args.input), args.size), args.output)
    return EXIT_OK


def cmd_infer_video(args) -> int:
    graph = _load(args.model, args, INFERENCE)
    if graph.config.arch != "stdnet":
        raise GraphError("infer-video needs a clip model")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dtype = next(iter(graph.params.values())).dtype
    written = 0
    for clip in read_clip(args.frames, args.clip):
        frames = clip.frames
        if frames.shape[1] == 1:
            frames = np.repeat(frames, 3, axis=1)
        h, w = frames.shape[-2:]
        n, c, t = frames.shape[:3]
        flat = frames.transpose(0, 2, 1, 3, 4).reshape(n * t, c, h, w)
        if args.size:
            flat = _resize(flat, args.size, args.size)
        x = flat.reshape(n, t, c, *flat.shape[-2:]).transpose(0, 2, 1, 3, 4)
        sal = predict(graph, x.astype(dtype))[0, 0]
        for i, name in enumerate(clip.names):
            m = _resize(sal[clip.padded + i][None, None], h, w)
            write_pgm(np.clip(m, 0, 1), out / (Path(name).stem + ".pgm"))
            written += 1
    log.info("wrote %d saliency maps to %s", written, out)
    print(f"maps: {written}")
    return EXIT_OK


def _probe(graph, size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    dtype = next(iter(graph.params.values())).dtype
    shape = (1, graph.config.in_channels, size, size)
    if graph.config.arch == "stdnet":
        shape = (1, graph.config.in_channels, graph.config.clip_len, size, size)
    return rng.uniform(0, 1, size=shape).astype(dtype)


def cmd_bench(args) -> int:
    graph = _load(args.model, args, INFERENCE)
    if args.iters < 1 or args.warmup < 0:
        raise UsageError("--iters must be >= 1 and --warmup >= 0")
    x = _probe(graph, args.size, args.seed)
    for _ in range(args.warmup):
        predict(graph, x)
    times = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        predict(graph, x)
        times.append(time.perf_counter() - t0)
    ms = np.array(times) * 1e3
    dims = x.shape[2:]
    cost = count_macs_params(graph, dims)
    w = _writer()
    w.writerow(["metric", "value"])
    for key, val in (("mean_ms", ms.mean()), ("p50_ms", np.percentile(ms, 50)), ("p95_ms", np.percentile(ms, 95)),
                     ("fps", 1e3 / ms.mean())):
        w.writerow([key, f"{val:.4f}"])
    w.writerow(["macs", cost["macs"]])
    w.writerow(["flops", cost["flops"]])
    w.writerow(["params", cost["params"]])
    if args.layers:
        w.writerow([])
        w.writerow(["layer", "branches", "kernel", "out", "params", "macs"])
        for row in cost["layers"]:
            w.writerow([row[k] for k in ("layer", "branches", "kernel", "out", "params", "macs")])
    return EXIT_OK


def cmd_eval(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise UsageError(f"unknown metric {bad[0]!r}; choose from {','.join(METRICS)}")
    scores = evaluate_dirs(args.pred, args.gt, metrics)
    w = _writer()
    w.writerow(["metric", "value"])
    for m in metrics:
        w.writerow([m, f"{scores[m]:.6f}"])
    return EXIT_OK


def cmd_inspect(args) -> int:
    graph = _load(args.model, args, TRAINING)
    stats = branch_statistics(graph, _probe(graph, args.size, args.seed))
    w = _writer()
    w.writerow(["layer", "branch", "alpha", "mean_abs"])
    for rec in stats:
        for kind, a, m in zip(rec["branches"], rec["alpha"], rec["mean_abs"]):
            w.writerow([rec["layer"], kind, f"{a:.6f}", f"{m:.6g}"])
    return EXIT_OK


TRAIN_DEFAULTS = dict(arch="sdnet", preset="toy", steps=500, lr=1e-3, milestones=[], gamma=0.1, seed=0,
                      loss="bce", size=64, images=4)


def _train_config(path) -> dict:
    cfg = dict(TRAIN_DEFAULTS)
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"config {path} is not valid JSON: {exc}") from None
        unknown = set(user) - set(cfg)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        cfg.update(user)
    if cfg["preset"] not in ("toy", "full") or cfg["loss"] not in ("bce", "combined"):
        raise ValueError("preset must be toy|full and loss bce|combined")
    return cfg


def _training_data(data_dir, cfg) -> tuple[np.ndarray, np.ndarray]:
    if data_dir is None:
        return square_dataset(cfg["images"], cfg["size"], cfg["seed"])
    images_dir, masks_dir = Path(data_dir) / "images", Path(data_dir) / "masks"
    images = list_frames(images_dir)
    if not images:
        raise ValueError(f"training dataset {images_dir} is empty")
    xs, ys = [], []
    for p in images:
        mask = next((m for m in list_frames(masks_dir) if m.stem == p.stem), None)
        if mask is None:
            raise FileNotFoundError(f"no mask for {p.name} in {masks_dir}")
        img, m = _rgb(read_image(p)), read_mask(mask)
        if img.shape[-2:] != m.shape[-2:]:
            raise ShapeError(f"{p.name} and its mask differ in size")
        xs.append(_resize(img, cfg["size"], cfg["size"]))
        ys.append((_resize(m, cfg["size"], cfg["size"]) >= 0.5).astype(np.float32))
    return np.concatenate(xs), np.concatenate(ys)


def cmd_train_toy(args) -> int:
    cfg = _train_config(args.config)
    x, y = _training_data(args.data, cfg)
    config = ModelConfig(arch=cfg["arch"], **(TOY if cfg["preset"] == "toy" else {}))
    dtype = np.float64 if args.f64 else np.float32
    graph = build_model(config, seed=cfg["seed"], dtype=dtype)
    if cfg["arch"] == "stdnet":
        x, y = boring_clip(x, config.clip_len), boring_clip(y, config.clip_len)
    loss = COMBINED if cfg["loss"] == "combined" else LossConfig()
    result = train_toy(graph, x, y, cfg["steps"], cfg["lr"], cfg["milestones"], cfg["gamma"], loss, seed=cfg["seed"])
    save_weights(result.graph, args.out)
    w = _writer()
    w.writerow(["step", "total", "bce", "iou", "ssim"])
    for i, r in enumerate(result.reports):
        w.writerow([i, f"{r.total:.8g}", f"{r.bce:.8g}", f"{r.iou:.8g}", f"{r.ssim:.8g}"])
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads (fallback: SDNW_THREADS)")
    common.add_argument("--f64", action="store_true", help="run in float64")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="sdnet", description="Difference-convolution saliency networks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init", parents=[common], help="write a randomly initialised training-form archive")
    s.add_argument("--arch", choices=("sdnet", "stdnet"), default="sdnet")
    s.add_argument("--preset", choices=("full", "toy"), default="full")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("reparam", parents=[common], help="fuse a training-form archive")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reparam)

    s = sub.add_parser("infer", parents=[common], help="saliency map for one image")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--size", type=int, default=320, help="network input size; 0 keeps the native size")
    s.add_argument("--allow-training-form", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("infer-video", parents=[common], help="saliency maps for a frame directory")
    s.add_argument("--model", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--clip", type=int, default=8)
    s.add_argument("--size", type=int, default=0, help="network input size; 0 keeps the native size")
    s.add_argument("--allow-training-form", action="store_true")
    s.set_defaults(func=cmd_infer_video)

    s = sub.add_parser("bench", parents=[common], help="time forward passes and report cost")
    s.add_argument("--model", required=True)
    s.add_argument("--size", type=int, default=320)
    s.add_argument("--iters", type=int, default=100)
    s.add_argument("--warmup", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--layers", action="store_true", help="append the per-layer cost table")
    s.add_argument("--allow-training-form", action="store_true")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("eval", parents=[common], help="dataset metrics over prediction/GT directories")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--metrics", default=",".join(METRICS))
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect", parents=[common], help="per-layer branch coefficients and response sizes")
    s.add_argument("--model", required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("train-toy", parents=[common], help="overfit a tiny dataset")
    s.add_argument("--config", default=None, help="JSON file overriding the toy training settings")
    s.add_argument("--data", default=None, help="directory with images/ and masks/; synthetic squares if omitted")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_toy)
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArchiveError, NetpbmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (GraphError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
