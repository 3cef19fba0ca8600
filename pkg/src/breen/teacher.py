"""Teacher feature grids and the pooled alignment targets derived from them.

A teacher grid is the G x G x D_t patch-token output of a frozen image
encoder (G = 336 / 14 = 24 for a ViT-L/14 at 336 px). Here it is either
loaded from a dumped file or produced by :func:`synth_teacher`, a fixed
random projection of each 14 x 14 pixel block plus a sinusoidal position
code.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CANVAS = 336
TEACHER_PATCH = 14
GRID = CANVAS // TEACHER_PATCH

GRID_MAGIC = b"BRTF"
HEATMAP_MAGIC = b"BRHM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")

FINE_FIRST = "fine_first"
COARSE_FIRST = "coarse_first"


class GeometryError(ValueError):
    """A stride, patch size or grid size that does not tile evenly."""


class FormatError(ValueError):
    """A feature-grid or heatmap file that fails validation."""


@dataclass
class TeacherFeatureGrid:
    features: np.ndarray  # (G, G, D_t) float32
    source: str = "synthetic"

    def __post_init__(self):
        f = np.asarray(self.features)
        if f.ndim != 3 or f.shape[0] != f.shape[1] or f.shape[0] < 1:
            raise GeometryError(f"teacher grid must be G x G x D, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("teacher grid contains non-finite values")
        self.features = f

    @property
    def grid_size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[2]


@dataclass
class AlignmentTarget:
    """Pooled targets, one ``(stride, tokens)`` entry per granularity, in sequence order."""

    entries: list[tuple[int, np.ndarray]]
    order: str = FINE_FIRST

    @property
    def strides(self) -> list[int]:
        return [s for s, _ in self.entries]

    @property
    def lengths(self) -> list[int]:
        return [t.shape[0] for _, t in self.entries]

    def __len__(self):
        return sum(self.lengths)


@dataclass
class LetterboxMap:
    orig_w: int
    orig_h: int
    scale: float
    pad_left: int
    pad_top: int
    canvas: int = CANVAS
    content_w: int = field(default=0)
    content_h: int = field(default=0)

    def to_canvas(self, x: float, y: float) -> tuple[float, float]:
        return x * self.scale + self.pad_left, y * self.scale + self.pad_top

    def to_original(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.pad_left) / self.scale, (y - self.pad_top) / self.scale


def _resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bot = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(image.dtype)


def letterbox(image: np.ndarray, canvas: int = CANVAS) -> tuple[np.ndarray, LetterboxMap]:
    """Aspect-preserving resize so the longer side equals ``canvas``, then
    zero-pad to ``canvas x canvas``. Odd leftovers go to the right/bottom."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w = image.shape[:2]
    if h < 1 or w < 1:
        raise ValueError(f"cannot letterbox an empty image of shape {image.shape}")
    scale = canvas / max(h, w)
    new_w = min(canvas, max(1, int(round(w * scale))))
    new_h = min(canvas, max(1, int(round(h * scale))))
    pad_left = (canvas - new_w) // 2
    pad_top = (canvas - new_h) // 2
    out = np.zeros((canvas, canvas, image.shape[2]), dtype=np.float32)
    out[pad_top : pad_top + new_h, pad_left : pad_left + new_w] = _resize_bilinear(
        image.astype(np.float32), new_h, new_w
    )
    return out, LetterboxMap(w, h, scale, pad_left, pad_top, canvas, new_w, new_h)


def pool_grid(grid, stride: int) -> np.ndarray:
    """Non-overlapping ``stride x stride`` mean pooling, flattened row-major.

    Token ``k`` covers window row ``k // (G/stride)`` and column ``k % (G/stride)``.
    """
    feats = grid.features if isinstance(grid, TeacherFeatureGrid) else np.asarray(grid)
    g, _, d = feats.shape
    if stride < 1 or g % stride:
        raise GeometryError(f"stride {stride} does not divide grid size {g}")
    n = g // stride
    pooled = feats.reshape(n, stride, n, stride, d).mean(axis=(1, 3))
    return pooled.reshape(n * n, d).astype(feats.dtype, copy=False)


def build_alignment_target(grid, strides, order: str = FINE_FIRST) -> AlignmentTarget:
    if not strides:
        raise ValueError("at least one stride is required")
    if order not in (FINE_FIRST, COARSE_FIRST):
        raise ValueError(f"unknown granularity order {order!r}")
    ordered = sorted(strides, reverse=(order == COARSE_FIRST))
    return AlignmentTarget([(s, pool_grid(grid, s)) for s in ordered], order)


def order_strides(strides, order: str = FINE_FIRST) -> list[int]:
    return sorted(strides, reverse=(order == COARSE_FIRST))


def _sincos(n: int, k: int) -> np.ndarray:
    n_freq = max((k + 1) // 2, 1)
    freqs = 1.0 / (100.0 ** (np.arange(n_freq) / n_freq))
    ang = np.arange(n)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)[:, :k]


def position_code(grid_size: int, dim: int) -> np.ndarray:
    """Sinusoidal 2-D code: the first half of the channels encode the row, the rest the column."""
    half = dim // 2
    code = np.zeros((grid_size, grid_size, dim))
    code[:, :, :half] = _sincos(grid_size, half)[:, None, :]
    code[:, :, half:] = _sincos(grid_size, dim - half)[None, :, :]
    return code


@functools.lru_cache(maxsize=16)
def teacher_projection(channels: int, dim: int, seed: int, patch: int = TEACHER_PATCH) -> np.ndarray:
    fan_in = patch * patch * channels
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((dim, fan_in)) / np.sqrt(fan_in)
    proj.flags.writeable = False
    return proj


def synth_content(canvas_image: np.ndarray, dim: int, seed: int, patch: int = TEACHER_PATCH) -> np.ndarray:
    """Content part of the synthetic teacher: R @ flatten(block) for every cell (float64)."""
    img = np.asarray(canvas_image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if h != w or h % patch:
        raise GeometryError(f"teacher needs a square canvas divisible by {patch}, got {img.shape}")
    g = h // patch
    blocks = img.reshape(g, patch, g, patch, c).transpose(0, 2, 1, 3, 4).reshape(g, g, -1)
    return blocks @ teacher_projection(c, dim, seed, patch).T


def synth_teacher(canvas_image: np.ndarray, seed: int = 0, dim: int = 32) -> TeacherFeatureGrid:
    """Deterministic stand-in for a CLIP patch grid."""
    content = synth_content(canvas_image, dim, seed)
    raw = content + position_code(content.shape[0], dim)
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    feats = raw / np.maximum(norm, 1e-12)
    return TeacherFeatureGrid(feats.astype(np.float32), source="synthetic")


# ------------------------------------------------------------------ file format


def encode_grid(features: np.ndarray, magic: bytes = GRID_MAGIC) -> bytes:
    f = np.ascontiguousarray(features, dtype="<f4")
    g, g2, d = f.shape
    if g != g2:
        raise GeometryError(f"grid must be square, got {f.shape}")
    return _HEADER.pack(magic, FORMAT_VERSION, g, d) + f.tobytes()


def decode_grid(buf: bytes, magic: bytes = GRID_MAGIC) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError(f"header: file is {len(buf)} bytes, need at least {_HEADER.size}")
    got_magic, version, g, d = _HEADER.unpack_from(buf)
    if got_magic != magic:
        raise FormatError(f"magic: expected {magic!r}, found {got_magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"version: expected {FORMAT_VERSION}, found {version}")
    if g < 1 or d < 1:
        raise FormatError(f"shape: G={g}, D={d}")
    need = _HEADER.size + g * g * d * 4
    if len(buf) != need:
        raise FormatError(f"payload: expected {need} bytes for G={g}, D={d}, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(g, g, d).astype(np.float32)


def save_feature_grid(grid: TeacherFeatureGrid, path) -> None:
    Path(path).write_bytes(encode_grid(grid.features))


def load_feature_grid(path) -> TeacherFeatureGrid:
    return TeacherFeatureGrid(decode_grid(Path(path).read_bytes()), source="file")


def save_tokens(tokens: np.ndarray, path) -> None:
    """Pooled tokens (n*n, D) are stored as an n x n x D grid in the same container."""
    n = int(round(np.sqrt(tokens.shape[0])))
    if n * n != tokens.shape[0]:
        raise GeometryError(f"{tokens.shape[0]} tokens do not form a square grid")
    Path(path).write_bytes(encode_grid(tokens.reshape(n, n, -1)))
