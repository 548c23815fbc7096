"""Synthetic RGB-D scenes, tensor files, PNM ingestion and normalisation.

Tensor file layout (all integers little-endian)::

    b"MTEN" | version u32 = 1 | dtype u8 | rank u8 | rank x extent u64 | payload

``dtype`` 0 is float32 and the payload is the row-major data. A checkpoint is
the same header up to ``dtype``, which is ``0xFF``, followed by an entry count
(u32) and, per entry, a u16 name length, the UTF-8 name and one tensor record
(``dtype | rank | extents | payload``).
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, FormatError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b"MTEN"
VERSION = 1
DTYPE_F32 = 0
DTYPE_DIRECTORY = 0xFF

# (mean colour) per class; class 0 is background
PALETTE = np.array(
    [
        [0.45, 0.45, 0.45],
        [0.85, 0.15, 0.15],
        [0.15, 0.75, 0.20],
        [0.15, 0.25, 0.85],
        [0.90, 0.80, 0.15],
        [0.75, 0.20, 0.80],
        [0.10, 0.80, 0.80],
        [0.95, 0.55, 0.10],
    ],
    dtype=np.float64,
)
MAX_CLASSES = len(PALETTE)
MIN_OBJECT_PIXELS = 16
COLOR_NOISE = 0.05


# --------------------------------------------------------------------------
# scenes
# --------------------------------------------------------------------------


@dataclass
class Shape:
    """One painted object. Coordinates are integer pixel positions (row, col)."""

    kind: str
    params: tuple[int, ...]
    label: int
    depth: float

    def contains(self, y: int, x: int) -> bool:
        if self.kind == "rect":
            y0, x0, y1, x1 = self.params
            return y0 <= y < y1 and x0 <= x < x1
        if self.kind == "disk":
            cy, cx, r = self.params
            return (y - cy) ** 2 + (x - cx) ** 2 <= r * r
        ay, ax, by, bx, cy, cx = self.params
        e0 = (bx - ax) * (y - ay) - (by - ay) * (x - ax)
        e1 = (cx - bx) * (y - by) - (cy - by) * (x - bx)
        e2 = (ax - cx) * (y - cy) - (ay - cy) * (x - cx)
        return (e0 >= 0 and e1 >= 0 and e2 >= 0) or (e0 <= 0 and e1 <= 0 and e2 <= 0)

    def mask(self, h: int, w: int) -> np.ndarray:
        yy, xx = np.mgrid[0:h, 0:w]
        if self.kind == "rect":
            y0, x0, y1, x1 = self.params
            return (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        if self.kind == "disk":
            cy, cx, r = self.params
            return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        ay, ax, by, bx, cy, cx = self.params
        e0 = (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)
        e1 = (cx - bx) * (yy - by) - (cy - by) * (xx - bx)
        e2 = (ax - cx) * (yy - cy) - (ay - cy) * (xx - cx)
        return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))


@dataclass
class Scene:
    """rgb ``(3, H, W)`` and depth ``(1, H, W)`` in [0, 1]; labels ``(H, W)`` in ``[0, K)``."""

    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray
    shapes: list[Shape] = field(default_factory=list)


def _random_shape(rng: np.random.Generator, h: int, w: int, k: int) -> Shape:
    label = int(rng.integers(1, k))
    kind = ("rect", "disk", "tri")[int(rng.integers(0, 3))]
    lo, hi = max(4, min(h, w) // 8), max(6, min(h, w) // 2)
    if kind == "rect":
        sh, sw = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
        y0, x0 = int(rng.integers(0, h - sh + 1)), int(rng.integers(0, w - sw + 1))
        params = (y0, x0, y0 + sh, x0 + sw)
    elif kind == "disk":
        r = int(rng.integers(lo // 2 + 1, hi // 2 + 1))
        params = (int(rng.integers(0, h)), int(rng.integers(0, w)), r)
    else:
        cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
        pts = []
        for _ in range(3):
            pts += [int(np.clip(cy + rng.integers(-hi, hi + 1), 0, h - 1)), int(np.clip(cx + rng.integers(-hi, hi + 1), 0, w - 1))]
        params = tuple(pts)
    return Shape(kind, params, label, 0.0)


def _paint(shapes: list[Shape], h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Owner index per pixel (-1 for background), painting far shapes first."""
    owner = np.full((h, w), -1, dtype=np.int64)
    for i in sorted(range(len(shapes)), key=lambda i: -shapes[i].depth):
        owner[shapes[i].mask(h, w)] = i
    return owner, np.bincount(owner[owner >= 0], minlength=len(shapes))


def synth_scene(seed: int, h: int = 64, w: int = 64, k: int = 5) -> Scene:
    """Deterministic scene of 3 to 7 coloured shapes at distinct depths.

    Nearer shapes occlude farther ones; labels record the nearest covering
    shape's class and 0 where no shape covers a pixel. Shapes left with fewer
    than 16 visible pixels are removed.
    """
    if k > MAX_CLASSES:
        raise ConfigurationError(f"{k} classes exceed the palette limit of {MAX_CLASSES}")
    if k < 2:
        raise ConfigurationError("need at least two classes")
    if h < 32 or w < 32:
        raise ConfigurationError("scenes must be at least 32x32")
    rng = np.random.default_rng(seed)
    while True:
        count = int(rng.integers(3, 8))
        shapes = [_random_shape(rng, h, w, k) for _ in range(count)]
        levels = rng.permutation(16)[:count]
        for s, lv in zip(shapes, levels):
            s.depth = float(0.1 + 0.04 * lv)
        while shapes:
            owner, visible = _paint(shapes, h, w)
            keep = [s for s, v in zip(shapes, visible) if v >= MIN_OBJECT_PIXELS]
            if len(keep) == len(shapes):
                break
            shapes = keep
        if shapes:
            break

    labels = np.zeros((h, w), dtype=np.int64)
    depth = np.empty((h, w), dtype=np.float64)
    # background: a slanted plane in the far range
    gy, gx = rng.uniform(-0.1, 0.1, size=2)
    yy, xx = np.mgrid[0:h, 0:w]
    depth[:] = 0.85 + gy * (yy / h - 0.5) + gx * (xx / w - 0.5)
    class_colour = PALETTE[:k] + rng.uniform(-0.05, 0.05, size=(k, 3))
    colour = np.empty((h, w, 3), dtype=np.float64)
    colour[:] = class_colour[0]
    for i, s in enumerate(shapes):
        m = owner == i
        labels[m] = s.label
        depth[m] = s.depth
        colour[m] = class_colour[s.label]
    colour += rng.normal(0.0, COLOR_NOISE, size=colour.shape)
    rgb = np.clip(colour, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)
    return Scene(rgb=rgb, depth=np.clip(depth, 0, 1)[None].astype(np.float32), labels=labels, shapes=shapes)


@dataclass
class Dataset:
    """Stacked scenes: rgb ``(N,3,H,W)``, depth ``(N,1,H,W)``, labels ``(N,H,W)``."""

    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray
    seeds: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rgb)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.rgb[idx], self.depth[idx], self.labels[idx], [self.seeds[i] for i in idx])


def make_dataset(seeds, h: int = 64, w: int = 64, k: int = 5) -> Dataset:
    scenes = [synth_scene(s, h, w, k) for s in seeds]
    return Dataset(
        rgb=np.stack([s.rgb for s in scenes]),
        depth=np.stack([s.depth for s in scenes]),
        labels=np.stack([s.labels for s in scenes]),
        seeds=list(seeds),
    )


def save_scene(directory: str | os.PathLike, scene: Scene) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "rgb.mten", scene.rgb[None])
    save_tensor(d / "depth.mten", scene.depth[None])
    save_tensor(d / "labels.mten", scene.labels[None, None].astype(np.float32))


def load_dataset(root: str | os.PathLike) -> Dataset:
    """Read every ``scenes/<seed>/`` directory under ``root``, ordered by seed."""
    base = Path(root) / "scenes"
    if not base.is_dir():
        raise FileNotFoundError(f"no scenes directory under {root}")
    dirs = sorted((p for p in base.iterdir() if p.is_dir()), key=lambda p: int(p.name))
    if not dirs:
        raise FileNotFoundError(f"no scenes in {base}")
    rgb, depth, labels = [], [], []
    for d in dirs:
        rgb.append(load_tensor(d / "rgb.mten")[0])
        depth.append(load_tensor(d / "depth.mten")[0])
        labels.append(load_tensor(d / "labels.mten")[0, 0].astype(np.int64))
    return Dataset(np.stack(rgb), np.stack(depth), np.stack(labels), [int(d.name) for d in dirs])


# --------------------------------------------------------------------------
# tensor files
# --------------------------------------------------------------------------


def _encode_record(arr: np.ndarray) -> bytes:
    arr = np.array(arr, dtype="<f4", order="C")
    head = struct.pack("<BB", DTYPE_F32, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def save_tensor(path: str | os.PathLike, tensor) -> None:
    """Write one float32 array (or :class:`Tensor`) in the tensor file layout."""
    arr = getattr(tensor, "data", tensor)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION) + _encode_record(np.asarray(arr)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated {what}: expected {n} bytes, found {len(self.buf) - self.pos}", self.pos
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def header(self) -> int:
        if self.take(4, "magic") != MAGIC:
            raise FormatError("bad magic, not a tensor file", 0)
        (version,) = struct.unpack("<I", self.take(4, "version"))
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", 4)
        return self.take(1, "dtype")[0]

    def record(self, dtype: int) -> np.ndarray:
        if dtype != DTYPE_F32:
            raise FormatError(f"unknown dtype code {dtype}", self.pos - 1)
        rank = self.take(1, "rank")[0]
        shape = struct.unpack(f"<{rank}Q", self.take(8 * rank, "extents"))
        n = int(np.prod(shape, dtype=np.int64)) * 4
        payload = self.take(n, "payload")
        return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    """Read a single-tensor file; raises :class:`FormatError` on malformed input."""
    r = _Reader(Path(path).read_bytes())
    arr = r.record(r.header())
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after payload", r.pos)
    return arr


def save_checkpoint(path: str | os.PathLike, entries: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays as one directory file, in the given order."""
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<B", DTYPE_DIRECTORY), struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, _encode_record(np.asarray(arr))]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    r = _Reader(Path(path).read_bytes())
    if r.header() != DTYPE_DIRECTORY:
        raise FormatError("not a checkpoint (single tensor file)", 8)
    (count,) = struct.unpack("<I", r.take(4, "entry count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", r.take(2, "name length"))
        name = r.take(n, "name").decode("utf-8")
        out[name] = r.record(r.take(1, "dtype")[0])
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after last entry", r.pos)
    return out


# --------------------------------------------------------------------------
# PNM images
# --------------------------------------------------------------------------


def _pnm_header(buf: bytes) -> tuple[bytes, list[int], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header", pos)
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens[0], [int(t) for t in tokens[1:]], pos + 1


def load_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read binary PGM (P5) or PPM (P6) with maxval 255 as floats in [0, 1].

    Returns an array of shape ``(1, 1, H, W)`` or ``(1, 3, H, W)``.
    """
    buf = Path(path).read_bytes()
    magic, (w, h, maxval), start = _pnm_header(buf)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM variant {magic.decode(errors='replace')}; only P5/P6", 0)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}; only 255", 0)
    c = 1 if magic == b"P5" else 3
    n = w * h * c
    raster = buf[start:start + n]
    if len(raster) != n:
        raise FormatError(f"truncated raster: expected {n} bytes, found {len(raster)}", start)
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return (img.astype(np.float32) / np.float32(255))[None]


def save_pnm(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write ``(H, W)`` or ``(3, H, W)`` uint8 data as P5/P6."""
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 2:
        magic, raster = b"P5", img
    elif img.ndim == 3 and img.shape[0] == 3:
        magic, raster = b"P6", img.transpose(1, 2, 0)
    else:
        raise ShapeError(f"cannot write image of shape {img.shape}")
    h, w = raster.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(raster).tobytes())


# --------------------------------------------------------------------------
# normalisation
# --------------------------------------------------------------------------

STD_FLOOR = 1e-6


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def compute_stats(rgb: np.ndarray) -> NormStats:
    """Per-channel mean and standard deviation over an ``(N, C, H, W)`` split."""
    if rgb.ndim != 4 or len(rgb) == 0:
        raise ContractError("statistics need a non-empty (N, C, H, W) array")
    x = rgb.astype(np.float64)
    return NormStats(mean=x.mean(axis=(0, 2, 3)), std=x.std(axis=(0, 2, 3)))


def normalize(rgb: np.ndarray, stats: NormStats) -> np.ndarray:
    """``(x - mean) / std`` per channel, with ``std`` floored at 1e-6."""
    std = np.asarray(stats.std, dtype=np.float64)
    if np.any(std < STD_FLOOR):
        logger.warning("channel(s) %s have near-zero variance; std floored", np.flatnonzero(std < STD_FLOOR).tolist())
        std = np.maximum(std, STD_FLOOR)
    mean = np.asarray(stats.mean, dtype=np.float64)
    shape = (1, -1, 1, 1) if rgb.ndim == 4 else (-1, 1, 1)
    return ((rgb - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)


def normalize_depth(depth: np.ndarray) -> np.ndarray:
    """Depth is already metric-free in [0, 1]; clip guards against drift."""
    return np.clip(depth, 0.0, 1.0).astype(np.float32)
