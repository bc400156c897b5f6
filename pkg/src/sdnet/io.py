"""Weight archives (``.sdnw``), binary NetPBM images, and frame-directory clips.

Archive layout (all integers little-endian)::

    b"SDNW" | u32 version | u8 form (0 training, 1 inference)
    u32 descriptor length | descriptor (UTF-8 JSON)
    u32 tensor count
    per tensor: u32 name length | UTF-8 name | u8 dtype (0 f32, 1 f64) | u8 rank | u32 dims[rank] | raw data
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import INFERENCE, TRAINING, GraphError, ModelConfig, ModelGraph

MAGIC = b"SDNW"
VERSION = 1
FORMS = {TRAINING: 0, INFERENCE: 1}
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class ArchiveError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte {offset})")


class NetpbmError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


@dataclass
class WeightArchive:
    form: str
    descriptor: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, WeightArchive):
            return NotImplemented
        if self.form != other.form or self.descriptor != other.descriptor:
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        return all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.tensors.values(), other.tensors.values()))


def archive_from_graph(graph: ModelGraph) -> WeightArchive:
    graph.validate()
    return WeightArchive(graph.form, graph.descriptor(), dict(graph.params))


def graph_from_archive(archive: WeightArchive) -> ModelGraph:
    from .models import rebuild

    try:
        config = ModelConfig.from_dict(archive.descriptor["config"])
    except (KeyError, TypeError, GraphError) as exc:
        raise ArchiveError(f"descriptor has no usable model config: {exc}") from None
    graph = rebuild(config, archive.form)
    described = archive.descriptor.get("layers")
    if described is not None:
        names = [d.get("name") for d in described]
        if names != list(graph.layers):
            raise ArchiveError("descriptor layer list does not match its config")
        for d in described:
            if d.get("kernel") != graph.layers[d["name"]].kernel:
                raise ArchiveError(f"descriptor kernel for layer {d['name']!r} does not match its form")
    graph.params = dict(archive.tensors)
    graph.validate()
    return graph


def save_weights(archive: WeightArchive | ModelGraph, path: str | os.PathLike) -> None:
    if isinstance(archive, ModelGraph):
        archive = archive_from_graph(archive)
    if archive.form not in FORMS:
        raise ArchiveError(f"unknown form {archive.form!r}")
    desc = json.dumps(archive.descriptor, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IB", VERSION, FORMS[archive.form]), struct.pack("<I", len(desc)), desc,
             struct.pack("<I", len(archive.tensors))]
    for name, t in archive.tensors.items():
        t = np.asarray(t)
        code = DTYPE_CODES.get(t.dtype.newbyteorder("="))
        if code is None:
            raise ArchiveError(f"tensor {name!r} has unsupported dtype {t.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<BB", code, t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype=DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ArchiveError(f"truncated archive while reading {what}: need {n} bytes, "
                               f"{len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_weights(path: str | os.PathLike, validate: bool = True) -> WeightArchive:
    """Read an archive, checking header, descriptor and tensor names before touching data."""
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise ArchiveError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise ArchiveError(f"unsupported format version {version}", 4)
    (form_code,) = r.unpack("<B", "form flag")
    forms = {v: k for k, v in FORMS.items()}
    if form_code not in forms:
        raise ArchiveError(f"unknown form flag {form_code}", 8)
    (desc_len,) = r.unpack("<I", "descriptor length")
    desc_at = r.pos
    try:
        descriptor = json.loads(r.take(desc_len, "descriptor").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"descriptor is not valid UTF-8 JSON: {exc}", desc_at) from None
    if descriptor.get("form", forms[form_code]) != forms[form_code]:
        raise ArchiveError("descriptor form disagrees with the form flag", desc_at)
    (count,) = r.unpack("<I", "tensor count")

    records = []
    for _ in range(count):
        at = r.pos
        (name_len,) = r.unpack("<I", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        code, rank = r.unpack("<BB", f"header of tensor {name!r}")
        if code not in DTYPES:
            raise ArchiveError(f"tensor {name!r} has unknown dtype code {code}", r.pos - 2)
        dims = r.unpack(f"<{rank}I", f"dims of tensor {name!r}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * DTYPES[code].itemsize
        data_at = r.pos
        r.take(nbytes, f"data of tensor {name!r}")
        records.append((name, code, dims, data_at, nbytes, at))
    if r.pos != len(r.buf):
        raise ArchiveError(f"{len(r.buf) - r.pos} trailing bytes after the last tensor", r.pos)

    names = [rec[0] for rec in records]
    seen = set()
    for name, *_, at in records:
        if name in seen:
            raise ArchiveError(f"tensor {name!r} appears more than once", at)
        seen.add(name)
    archive = WeightArchive(forms[form_code], descriptor, {})
    if validate:
        _check_names(archive, names, records)
    for name, code, dims, data_at, nbytes, _ in records:
        arr = np.frombuffer(r.buf, dtype=DTYPES[code], count=nbytes // DTYPES[code].itemsize, offset=data_at)
        archive.tensors[name] = arr.reshape(dims).astype(DTYPES[code].newbyteorder("="))
    return archive


def _check_names(archive: WeightArchive, names: list[str], records) -> None:
    from .models import rebuild

    try:
        config = ModelConfig.from_dict(archive.descriptor["config"])
        expected = rebuild(config, archive.form).param_shapes()
    except (KeyError, TypeError, GraphError) as exc:
        raise ArchiveError(f"descriptor does not describe a model: {exc}") from None
    for name, code, dims, *_, at in records:
        if name not in expected:
            raise ArchiveError(f"unknown tensor {name!r} not named by the descriptor", at)
        if tuple(dims) != tuple(expected[name]):
            raise ArchiveError(f"tensor {name!r} has dims {tuple(dims)}, descriptor expects {expected[name]}", at)
    missing = [n for n in expected if n not in set(names)]
    if missing:
        raise ArchiveError(f"missing tensor {missing[0]!r} named by the descriptor")


def load_model(path: str | os.PathLike) -> ModelGraph:
    return graph_from_archive(load_weights(path))


# --------------------------------------------------------------------------- NetPBM


def _header(data: bytes, fields: int):
    """Parse ``fields`` whitespace-separated header tokens; returns tokens and raster offset."""
    tokens, pos, line = [], 0, 1
    while len(tokens) < fields:
        if pos >= len(data):
            raise NetpbmError("header ends before all fields are read", line)
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        if ch.isspace():
            line += ch == b"\n"
            pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((data[start:pos].decode("ascii", "replace"), line))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise NetpbmError("missing whitespace after maxval", line)
    return tokens, pos + 1


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6), 8-bit, as a float32 (1, C, H, W) tensor in [0, 1]."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic in (b"P2", b"P3", b"P1", b"P4"):
        raise NetpbmError(f"unsupported NetPBM variant {magic.decode()} (only binary P5/P6 are read)", 1)
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"not a binary NetPBM file (magic {magic!r})", 1)
    tokens, offset = _header(data[2:], 3)
    values = []
    for (tok, line), what in zip(tokens, ("width", "height", "maxval")):
        if not tok.isdigit():
            raise NetpbmError(f"{what} {tok!r} is not a positive integer", line)
        values.append(int(tok))
    width, height, maxval = values
    if maxval != 255:
        raise NetpbmError(f"maxval must be 255, got {maxval}", tokens[2][1])
    if width < 1 or height < 1:
        raise NetpbmError(f"image extents must be >= 1, got {width}x{height}", tokens[0][1])
    channels = 3 if magic == b"P6" else 1
    raster = data[2 + offset:]
    need = width * height * channels
    if len(raster) < need:
        raise NetpbmError(f"raster has {len(raster)} bytes, expected {need}")
    pix = np.frombuffer(raster[:need], dtype=np.uint8).reshape(height, width, channels)
    return (pix.transpose(2, 0, 1)[None].astype(np.float32) / np.float32(255.0))


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(saliency: np.ndarray, path: str | os.PathLike) -> None:
    """Write a single-channel map in [0, 1] as an 8-bit binary PGM, ``round(v * 255)``."""
    m = np.asarray(saliency)
    while m.ndim > 2:
        if m.shape[0] != 1:
            raise ValueError(f"write_pgm needs a single map, got shape {saliency.shape}")
        m = m[0]
    h, w = m.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + _to_bytes(m).tobytes())


def write_ppm(image: np.ndarray, path: str | os.PathLike) -> None:
    """Write a (3, H, W) or (1, 3, H, W) image in [0, 1] as an 8-bit binary PPM."""
    img = np.asarray(image)
    if img.ndim == 4:
        img = img[0]
    c, h, w = img.shape
    if c != 3:
        raise ValueError(f"write_ppm needs 3 channels, got {c}")
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + _to_bytes(img.transpose(1, 2, 0)).tobytes())


def read_mask(path: str | os.PathLike) -> np.ndarray:
    """Ground-truth map binarised at 0.5, as (1, 1, H, W) float32."""
    img = read_image(path)
    return (img[:, :1] >= 0.5).astype(np.float32)


# --------------------------------------------------------------------------- clips

FRAME_SUFFIXES = (".ppm", ".pgm")


@dataclass
class Clip:
    frames: np.ndarray  # (1, C, T, H, W)
    names: list[str]  # genuine frames only, in order
    padded: int  # number of leading duplicate frames

    @property
    def genuine(self) -> slice:
        return slice(self.padded, None)


def list_frames(directory: str | os.PathLike) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def read_clip(directory: str | os.PathLike, clip_len: int = 8) -> list[Clip]:
    """Split a frame directory into non-overlapping clips of ``clip_len`` frames.

    A short final clip is left-padded by repeating its first frame; only the
    genuine frames are listed in ``Clip.names``.
    """
    if clip_len < 1:
        raise ValueError("clip_len must be >= 1")
    paths = list_frames(directory)
    if not paths:
        raise FileNotFoundError(f"no .ppm/.pgm frames in {directory}")
    frames = [read_image(p) for p in paths]
    shape = frames[0].shape
    for p, f in zip(paths, frames):
        if f.shape != shape:
            raise ValueError(f"frame {p.name} is {f.shape[1:]} but {paths[0].name} is {shape[1:]}")
    clips = []
    for start in range(0, len(frames), clip_len):
        chunk = frames[start:start + clip_len]
        names = [p.name for p in paths[start:start + clip_len]]
        padded = clip_len - len(chunk)
        chunk = [chunk[0]] * padded + chunk
        clips.append(Clip(np.stack(chunk, axis=2), names, padded))
    return clips
