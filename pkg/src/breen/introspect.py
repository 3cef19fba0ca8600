"""Attention heatmaps: from an output token to the query slots or to the image tokens."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from breen.sequence import Role
from breen.teacher import CANVAS, GRID, HEATMAP_MAGIC, TEACHER_PATCH, GeometryError, decode_grid, encode_grid


class CaptureError(ValueError):
    """Attention was not captured, or the requested token cannot see the target."""


@dataclass
class Heatmap:
    grid: np.ndarray  # teacher (G x G) or image-token grid
    upsampled: np.ndarray  # canvas x canvas
    normalization: str = "none"
    factor: int = TEACHER_PATCH


def expand(grid: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour block expansion: every cell becomes a factor x factor block."""
    return np.repeat(np.repeat(np.asarray(grid), factor, axis=0), factor, axis=1)


def middle_layer(n_layers: int) -> int:
    return n_layers // 2


def _attention_row(output, token_idx: int, layer: int, sample: int) -> np.ndarray:
    if output.attentions is None:
        raise CaptureError("forward was run without capture_attn=True")
    if not 0 <= layer < len(output.attentions):
        raise CaptureError(f"layer {layer} out of range (0..{len(output.attentions) - 1})")
    seq = output.sequences[sample]
    if not 0 <= token_idx < len(seq):
        raise CaptureError(f"token index {token_idx} outside sequence of length {len(seq)}")
    return output.attentions[layer][sample, :, token_idx, :].mean(axis=0)


def _resolve_stride(seq, granularity) -> int:
    strides = sorted(seq.query_slots)
    if not strides:
        raise CaptureError("sequence has no query tokens")
    if granularity in ("fine", None):
        return strides[0]
    if granularity == "coarse":
        return strides[-1]
    s = int(granularity)
    if s not in seq.query_slots:
        raise CaptureError(f"no query block for stride {s}; have {strides}")
    return s


def attention_to_queries(output, token_idx: int, layer: int, granularity="fine", sample: int = 0) -> np.ndarray:
    """Head-averaged attention from ``token_idx`` to one query block, row-major over the pooled grid."""
    seq = output.sequences[sample]
    s = _resolve_stride(seq, granularity)
    start, end = seq.query_slots[s]
    if token_idx < start:
        raise CaptureError(f"token {token_idx} precedes the stride-{s} queries at {start} and cannot attend to them")
    return _attention_row(output, token_idx, layer, sample)[start:end].copy()


def reconstruct_heatmap(scores, stride: int, grid: int = GRID, patch: int = TEACHER_PATCH) -> Heatmap:
    scores = np.asarray(scores, dtype=np.float32)
    if grid % stride:
        raise GeometryError(f"stride {stride} does not divide grid {grid}")
    n = grid // stride
    if scores.shape != (n * n,):
        raise GeometryError(f"expected {n * n} scores for stride {stride}, got {scores.shape}")
    g = expand(scores.reshape(n, n), stride)
    return Heatmap(g, expand(g, patch), "none", patch)


def attention_to_image(output, token_idx: int, layer: int, sample: int = 0, patch: int | None = None) -> Heatmap:
    seq = output.sequences[sample]
    pos = np.flatnonzero(seq.roles == Role.IMAGE)
    if pos.size == 0:
        raise CaptureError("sequence has no image tokens")
    if token_idx < pos[0]:
        raise CaptureError(f"token {token_idx} precedes the image tokens")
    n = int(round(np.sqrt(pos.size)))
    if n * n != pos.size:
        raise GeometryError(f"{pos.size} image tokens do not form a square grid")
    patch = patch or CANVAS // n
    g = _attention_row(output, token_idx, layer, sample)[pos].reshape(n, n).astype(np.float32)
    return Heatmap(g, expand(g, patch), "none", patch)


def all_layers(output, token_idx: int, target="image", granularity="fine", sample: int = 0) -> list[Heatmap]:
    """One heatmap per captured layer."""
    maps = []
    for layer in range(len(output.attentions or [])):
        if target == "image":
            maps.append(attention_to_image(output, token_idx, layer, sample))
        else:
            seq = output.sequences[sample]
            s = _resolve_stride(seq, granularity)
            maps.append(reconstruct_heatmap(attention_to_queries(output, token_idx, layer, s, sample), s))
    return maps


def minmax_u8(a: np.ndarray) -> np.ndarray:
    """Per-map min-max scaling to 0..255; a constant map becomes all zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.round((a - lo) / (hi - lo) * 255).astype(np.uint8)


def save_heatmap_grid(h: Heatmap, path) -> None:
    Path(path).write_bytes(encode_grid(h.grid.astype(np.float32)[:, :, None], magic=HEATMAP_MAGIC))


def load_heatmap_grid(path) -> np.ndarray:
    return decode_grid(Path(path).read_bytes(), magic=HEATMAP_MAGIC)[:, :, 0]


def emit_heatmap(h: Heatmap, path, overlay: np.ndarray | None = None) -> dict:
    """Write ``<path>.pgm`` (8-bit), ``<path>.brhm`` (raw grid) and optionally ``<path>.ppm``.

    ``overlay`` is an RGB image (uint8 or floats in [0, 1]) the size of the
    heatmap; the heat goes into the red channel at 50% opacity.
    """
    base = Path(path)
    out = {"pgm": base.with_suffix(".pgm"), "brhm": base.with_suffix(".brhm")}
    heat = minmax_u8(h.upsampled)
    try:
        Image.fromarray(heat, mode="L").save(out["pgm"], format="PPM")
        save_heatmap_grid(h, out["brhm"])
        if overlay is not None:
            img = np.asarray(overlay)
            if img.dtype != np.uint8:
                img = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
            if img.shape[:2] != heat.shape:
                raise GeometryError(f"overlay is {img.shape[:2]}, heatmap is {heat.shape}")
            color = np.zeros(img.shape, dtype=np.float64)
            color[..., 0] = heat
            blend = np.round(0.5 * img + 0.5 * color).astype(np.uint8)
            out["ppm"] = base.with_suffix(".ppm")
            Image.fromarray(blend, mode="RGB").save(out["ppm"], format="PPM")
    except OSError as e:
        raise OSError(f"cannot write heatmap to {base}: {e}") from e
    return out
