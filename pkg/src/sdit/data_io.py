"""Datasets (IDX files, toy generators), image grids and checkpoints."""

from __future__ import annotations

import gzip
import io
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BadMagic, BadParam, ChecksumMismatch, ConfigMismatch, DimMismatch, IoError,
                     TruncatedFile, VersionMismatch)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


# ------------------------------------------------------------- pixel mapping


def u8_to_unit(p: np.ndarray) -> np.ndarray:
    """0..255 -> [-1, 1] with both endpoints exact."""
    return np.asarray(p, dtype=np.float64) / 127.5 - 1.0


def unit_to_u8(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


# ------------------------------------------------------------------ datasets


@dataclass
class Dataset:
    images: np.ndarray  # [M, C, H, W] in [-1, 1]
    source: str
    seed: int | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) < 1:
            raise BadParam(f"need a non-empty [M, C, H, W] array, got {self.images.shape}")
        if self.images.min() < -1.0 or self.images.max() > 1.0:
            raise BadParam("image values must lie in [-1, 1]")

    def __len__(self) -> int:
        return len(self.images)


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IoError(str(e)) from e
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def _parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFile(f"{what}: header too short")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagic(f"{what}: magic {found:#010x}, expected {magic:#010x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise TruncatedFile(f"{what}: dimension header too short")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    need = math.prod(dims)
    if len(body) < need:
        raise TruncatedFile(f"{what}: payload has {len(body)} bytes, header promises {need}")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)


def load_idx(images_path, labels_path=None) -> Dataset:
    """Read an IDX u8 image file (and optional label file); ``.gz`` is accepted."""
    pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    if 0 in pixels.shape:
        raise DimMismatch(f"images: empty dimension in {pixels.shape}")
    labels = None
    if labels_path is not None:
        labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
        if len(labels) != len(pixels):
            raise DimMismatch(f"{len(labels)} labels for {len(pixels)} images")
    images = u8_to_unit(pixels)[:, None]
    return Dataset(images=images, source=str(images_path), labels=labels)


def gen_toy_dataset(kind: str, n: int, size: int, seed: int, channels: int = 1) -> Dataset:
    """``bars``: one bright full-length row or column; ``blobs``: one Gaussian bump."""
    if size not in (8, 16, 28):
        raise BadParam(f"size must be 8, 16 or 28, got {size}")
    if n < 1 or channels not in (1, 3):
        raise BadParam("need n >= 1 and 1 or 3 channels")
    rng = np.random.default_rng(seed)
    images = -np.ones((n, channels, size, size))
    if kind == "bars":
        vertical = rng.random(n) < 0.5
        where = rng.integers(0, size, n)
        for i in range(n):
            if vertical[i]:
                images[i, :, :, where[i]] = 1.0
            else:
                images[i, :, where[i], :] = 1.0
    elif kind == "blobs":
        sigma = size / 8.0
        yy, xx = np.mgrid[0:size, 0:size]
        centers = rng.uniform(0, size - 1, (n, 2))
        amps = rng.uniform(0.5, 1.0, (n, channels)) if channels > 1 else np.ones((n, 1))
        for i in range(n):
            d2 = (yy - centers[i, 0]) ** 2 + (xx - centers[i, 1]) ** 2
            bump = np.exp(-d2 / (2 * sigma**2))
            images[i] = -1.0 + 2.0 * amps[i][:, None, None] * bump[None]
    else:
        raise BadParam(f"unknown toy dataset {kind!r}")
    return Dataset(images=images, source=f"toy:{kind}:{size}", seed=seed)


# -------------------------------------------------------------------- images


def image_grid(images: np.ndarray, cols: int, sep: int = 2) -> np.ndarray:
    """Tile ``[n, C, H, W]`` into a ``[H', W', C]`` u8 canvas with black separators."""
    images = np.asarray(images)
    n, c, h, w = images.shape
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    canvas = np.zeros((rows * h + (rows - 1) * sep, cols * w + (cols - 1) * sep, c), np.uint8)
    pix = unit_to_u8(images).transpose(0, 2, 3, 1)
    for i in range(n):
        r, q = divmod(i, cols)
        canvas[r * (h + sep):r * (h + sep) + h, q * (w + sep):q * (w + sep) + w] = pix[i]
    return canvas


def write_image_grid(images, path, cols: int) -> None:
    """Binary PGM (one channel) or PPM (three channels)."""
    canvas = image_grid(images, cols)
    hgt, wid, c = canvas.shape
    if c not in (1, 3):
        raise BadParam(f"cannot write {c}-channel images")
    header = f"{'P5' if c == 1 else 'P6'}\n{wid} {hgt}\n255\n".encode("ascii")
    try:
        Path(path).write_bytes(header + canvas.tobytes())
    except OSError as e:
        raise IoError(str(e)) from e


def read_pnm(path) -> np.ndarray:
    """Inverse of :func:`write_image_grid` for files it produced; ``[H, W, C]`` u8."""
    raw = _read_bytes(path)
    magic, dims, maxval, body = raw.split(b"\n", 3)
    wid, hgt = map(int, dims.split())
    c = {b"P5": 1, b"P6": 3}[magic]
    if int(maxval) != 255 or len(body) != wid * hgt * c:
        raise TruncatedFile(f"{path}: malformed PNM payload")
    return np.frombuffer(body, np.uint8).reshape(hgt, wid, c)


# ------------------------------------------------------------- key = value


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_kv(d: dict) -> str:
    """Canonical ``key = value`` text, keys sorted."""
    return "".join(f"{k} = {_format_value(d[k])}\n" for k in sorted(d))


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadParam(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def coerce(value: str, like):
    """Parse ``value`` as the type of the default ``like``."""
    if isinstance(like, bool):
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise BadParam(f"not a boolean: {value!r}")
    if like is None:
        return None if value in ("", "none", "None") else value
    try:
        return type(like)(value)
    except ValueError:
        raise BadParam(f"cannot read {value!r} as {type(like).__name__}") from None


# --------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SDIT"
CKPT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass
class Checkpoint:
    config: dict  # flat ModelConfig dict
    params: dict[str, np.ndarray]  # model parameters, in model order
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)  # "m/<name>", "v/<name>"
    meta: dict = field(default_factory=dict)  # step, rng state, run settings


def _encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    for block in (format_kv(ckpt.config), json.dumps(ckpt.meta, sort_keys=True)):
        data = block.encode("utf-8")
        buf.write(struct.pack("<I", len(data)))
        buf.write(data)
    records = list(ckpt.params.items()) + list(ckpt.optimizer.items())
    buf.write(struct.pack("<II", len(ckpt.params), len(ckpt.optimizer)))
    for name, arr in records:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise BadParam(f"{name}: unsupported dtype {arr.dtype}")
        nm = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nm)))
        buf.write(nm)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    payload = _encode(ckpt)
    blob = CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + payload
    blob += struct.pack("<I", zlib.crc32(payload))
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(blob)
    except OSError as e:
        raise IoError(str(e)) from e


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile("checkpoint ends early")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expect_config: dict | None = None) -> Checkpoint:
    """Read and validate a checkpoint.

    With ``expect_config`` the stored model config must match it exactly.
    """
    raw = _read_bytes(path)
    if raw[:4] != CKPT_MAGIC:
        raise BadMagic(f"{path}: not a checkpoint")
    if len(raw) < 12:
        raise TruncatedFile(f"{path}: too short")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {CKPT_VERSION}")
    payload, (crc,) = raw[8:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")

    r = _Reader(payload)
    texts = []
    for _ in range(2):
        (n,) = r.unpack("<I")
        texts.append(r.take(n).decode("utf-8"))
    config = parse_kv(texts[0])
    meta = json.loads(texts[1])
    n_params, n_opt = r.unpack("<II")
    tables: list[dict] = [{}, {}]
    for i in range(n_params + n_opt):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag not in _TAG_DTYPES:
            raise BadParam(f"{name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}I")
        dt = _TAG_DTYPES[tag]
        arr = np.frombuffer(r.take(math.prod(shape) * dt.itemsize), dtype=dt).reshape(shape)
        table = tables[0] if i < n_params else tables[1]
        if name in table:
            raise BadParam(f"duplicate record {name}")
        table[name] = arr.copy()
    if r.pos != len(payload):
        raise BadParam(f"{path}: trailing bytes after records")

    if expect_config is not None:
        expected = parse_kv(format_kv(expect_config))
        if expected != config:
            diff = sorted(k for k in set(expected) | set(config) if expected.get(k) != config.get(k))
            raise ConfigMismatch(f"{path}: config differs in {', '.join(diff)}")
    return Checkpoint(config=config, params=tables[0], optimizer=tables[1], meta=meta)


# ------------------------------------------------ model <-> checkpoint glue


def typed_model_config(config: dict):
    """Rebuild a ModelConfig from the string table stored in a checkpoint."""
    from .model import ModelConfig

    defaults = ModelConfig().to_dict()
    unknown = set(config) - set(defaults)
    if unknown:
        raise ConfigMismatch(f"unknown config keys {sorted(unknown)}")
    return ModelConfig.from_dict({k: coerce(str(v), defaults[k]) for k, v in config.items()})


def model_checkpoint(model, optimizer=None, meta: dict | None = None) -> Checkpoint:
    names = [n for n, _ in model.named_parameters()]
    params = {n: t.data for n, t in model.named_parameters()}
    opt = {}
    if optimizer is not None:
        by_id = {id(t): n for n, t in model.named_parameters()}
        for p, m, v in zip(optimizer.params, optimizer.m, optimizer.v):
            opt[f"m/{by_id[id(p)]}"] = m
            opt[f"v/{by_id[id(p)]}"] = v
        opt = {k: opt[k] for k in sorted(opt, key=lambda k: (names.index(k[2:]), k[0]))}
    return Checkpoint(config=model.config.to_dict(), params=params, optimizer=opt,
                      meta=dict(meta or {}))


def restore_model(ckpt: Checkpoint):
    """Build the model a checkpoint describes; every parameter must appear exactly once."""
    from . import tensor as tn
    from .model import SditModel

    cfg = typed_model_config(ckpt.config)
    model = SditModel.init(cfg, np.random.default_rng(0))
    live = dict(model.named_parameters())
    if set(live) != set(ckpt.params):
        missing, extra = set(live) - set(ckpt.params), set(ckpt.params) - set(live)
        raise ConfigMismatch(f"parameter table mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, t in live.items():
        arr = ckpt.params[name]
        if arr.shape != t.shape:
            raise ConfigMismatch(f"{name}: stored {arr.shape}, model wants {t.shape}")
        t.data = arr.astype(tn.get_default_dtype())
        t.grad = np.zeros_like(t.data)
    return model


def restore_optimizer(ckpt: Checkpoint, model, optimizer) -> None:
    by_id = {id(t): n for n, t in model.named_parameters()}
    for i, p in enumerate(optimizer.params):
        name = by_id[id(p)]
        optimizer.m[i] = ckpt.optimizer[f"m/{name}"].astype(p.dtype)
        optimizer.v[i] = ckpt.optimizer[f"v/{name}"].astype(p.dtype)
    optimizer.step_count = int(ckpt.meta.get("optimizer_steps", 0))
