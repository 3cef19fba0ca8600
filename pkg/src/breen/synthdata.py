"""Procedural shape images, a closed caption/question grammar, and dataset files.

Each image is 336 x 336 with up to three shapes on a 3 x 3 grid of 112-px
cells. A cell is exactly 8 teacher patches (14 px) or 4 student patches
(28 px) wide, so every shape lands on whole patches.
"""

from __future__ import annotations

import io
import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from breen.teacher import CANVAS, FormatError, TeacherFeatureGrid, decode_grid, encode_grid, synth_teacher

CELL = CANVAS // 3

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
COLORS = {
    "red": (230, 25, 25),
    "green": (30, 200, 40),
    "blue": (30, 60, 235),
    "yellow": (240, 230, 20),
    "cyan": (20, 220, 230),
    "magenta": (220, 30, 220),
    "white": (250, 250, 250),
    "orange": (250, 140, 10),
}
SHAPES = ("circle", "square", "triangle")
ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")
TEMPLATE = ("a", "at", "and", "what", "color", "is", "the")
WORDS = [PAD, BOS, EOS, *TEMPLATE, *COLORS, *SHAPES, *ROWS, *COLS]

CAPTION, QA = "caption", "qa"
DATASET_MAGIC = b"BRDS"
DATASET_VERSION = 1
GRAMMAR_VERSION = 1


class TokenizerError(KeyError):
    pass


class Vocab:
    def __init__(self, words=WORDS):
        self.words = list(words)
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary words must be unique")
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    @property
    def pad(self):
        return self.index[PAD]

    @property
    def bos(self):
        return self.index[BOS]

    @property
    def eos(self):
        return self.index[EOS]

    def color_ids(self) -> set[int]:
        return {self.index[c] for c in COLORS}

    def tokenize(self, text: str, bos: bool = True, eos: bool = True) -> list[int]:
        ids = []
        for w in text.split():
            if w not in self.index:
                raise TokenizerError(f"out-of-vocabulary word {w!r}")
            ids.append(self.index[w])
        return ([self.bos] if bos else []) + ids + ([self.eos] if eos else [])

    def detokenize(self, ids) -> str:
        special = {self.pad, self.bos, self.eos}
        return " ".join(self.words[i] for i in ids if i not in special)


VOCAB = Vocab()


def tokenize(text: str, bos: bool = True, eos: bool = True) -> list[int]:
    return VOCAB.tokenize(text, bos, eos)


def detokenize(ids) -> str:
    return VOCAB.detokenize(ids)


@dataclass(frozen=True)
class Placement:
    cell: int  # 0..8, raster order
    shape: str
    color: str
    dx: int
    dy: int
    size: int

    @property
    def position(self) -> str:
        return f"{ROWS[self.cell // 3]} {COLS[self.cell % 3]}"


@dataclass
class Sample:
    pixels: np.ndarray  # (336, 336, 3) uint8
    caption_ids: list[int]
    instr_ids: list[int]
    resp_ids: list[int]
    teacher: TeacherFeatureGrid
    sample_seed: int
    mode: str = CAPTION
    placements: list[Placement] = field(default_factory=list)

    @property
    def image(self) -> np.ndarray:
        return self.pixels.astype(np.float32) / 255.0


def caption_text(placements) -> str:
    return " and ".join(f"a {p.color} {p.shape} at {p.position}" for p in placements)


def question_text(p: Placement) -> str:
    return f"what color is the {p.shape} at {p.position}"


def _shape_mask(p: Placement) -> np.ndarray:
    yy, xx = np.mgrid[0:CANVAS, 0:CANVAS]
    cy = (p.cell // 3) * CELL + CELL // 2 + p.dy
    cx = (p.cell % 3) * CELL + CELL // 2 + p.dx
    r = p.size
    if p.shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if p.shape == "square":
        return (np.abs(yy - cy) <= r * 0.8) & (np.abs(xx - cx) <= r * 0.8)
    # upward triangle: apex on top, base at the bottom
    top, bottom = cy - r, cy + r
    half = (yy - top) / (2 * r) * r
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)


def render(placements) -> np.ndarray:
    img = np.zeros((CANVAS, CANVAS, 3), dtype=np.uint8)
    for p in placements:
        img[_shape_mask(p)] = COLORS[p.color]
    return img


def _placements(rng: np.random.Generator) -> list[Placement]:
    n = int(rng.integers(1, 4))
    cells = sorted(int(c) for c in rng.choice(9, size=n, replace=False))
    colors = list(COLORS)
    out = []
    for c in cells:
        out.append(
            Placement(
                cell=c,
                shape=SHAPES[int(rng.integers(len(SHAPES)))],
                color=colors[int(rng.integers(len(colors)))],
                dx=int(rng.integers(-8, 9)),
                dy=int(rng.integers(-8, 9)),
                size=int(rng.integers(30, 42)),
            )
        )
    return out


def gen_sample(seed: int, mode: str = CAPTION, teacher_seed: int = 0, teacher_dim: int = 32) -> Sample:
    """Everything in the sample is a pure function of ``seed`` (and the teacher settings)."""
    if mode not in (CAPTION, QA):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    placements = _placements(rng)
    pixels = render(placements)
    teacher = synth_teacher(pixels.astype(np.float32) / 255.0, teacher_seed, teacher_dim)
    caption = tokenize(caption_text(placements))
    instr, resp = [], []
    if mode == QA:
        target = placements[int(rng.integers(len(placements)))]
        instr = tokenize(question_text(target), eos=False)
        resp = tokenize(target.color, bos=False)
    return Sample(pixels, caption, instr, resp, teacher, seed, mode, placements)


def sample_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def gen_samples(seed: int, n: int, mode: str = CAPTION, teacher_seed: int = 0, teacher_dim: int = 32) -> list[Sample]:
    if n < 1:
        raise ValueError("n must be at least 1")
    return [gen_sample(sample_seed(seed, i), mode, teacher_seed, teacher_dim) for i in range(n)]


def answer_from_pixels(pixels: np.ndarray, instr_ids) -> str:
    """Recover the answer to a question by inspecting the rendered cell."""
    words = detokenize(instr_ids).split()
    row, col = ROWS.index(words[-2]), COLS.index(words[-1])
    block = pixels[row * CELL : (row + 1) * CELL, col * CELL : (col + 1) * CELL].reshape(-1, 3)
    lit = block[block.any(axis=1)]
    colors, counts = np.unique(lit, axis=0, return_counts=True)
    rgb = tuple(int(v) for v in colors[counts.argmax()])
    return next(name for name, c in COLORS.items() if c == rgb)


def grammar_sentences():
    """Every question and answer, every one-shape caption, and every two-shape
    caption in raster order. Longer captions only repeat these words."""
    cells = [(i, f"{r} {c}") for i, (r, c) in enumerate(itertools.product(ROWS, COLS))]
    phrases = [(i, f"a {c} {s} at {p}") for c in COLORS for s in SHAPES for i, p in cells]
    for _, a in phrases:
        yield a
    for (i, a), (j, b) in itertools.product(phrases, repeat=2):
        if i < j:
            yield f"{a} and {b}"
    for s in SHAPES:
        for _, p in cells:
            yield f"what color is the {s} at {p}"
    yield from COLORS


# ------------------------------------------------------------------ file format

_U32 = struct.Struct("<I")


def _pack_ids(ids) -> bytes:
    return _U32.pack(len(ids)) + np.asarray(ids, dtype="<u2").tobytes()


def _encode_image(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="RGB").save(buf, format="PPM")
    return buf.getvalue()


def _decode_image(buf: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(buf)) as im:
        if im.format != "PPM" or im.mode != "RGB":
            raise FormatError(f"expected an RGB PPM image, got {im.format} {im.mode}")
        return np.array(im, dtype=np.uint8)


def encode_record(s: Sample) -> bytes:
    img = _encode_image(s.pixels)
    grid = encode_grid(s.teacher.features)
    meta = json.dumps([[p.cell, p.shape, p.color, p.dx, p.dy, p.size] for p in s.placements]).encode()
    return b"".join(
        [
            struct.pack("<QB", s.sample_seed, 0 if s.mode == CAPTION else 1),
            _U32.pack(len(img)),
            img,
            _pack_ids(s.caption_ids),
            _pack_ids(s.instr_ids),
            _pack_ids(s.resp_ids),
            _U32.pack(len(grid)),
            grid,
            _U32.pack(len(meta)),
            meta,
        ]
    )


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated: need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def ids(self) -> list[int]:
        n = self.u32()
        return np.frombuffer(self.take(2 * n), dtype="<u2").astype(int).tolist()


def decode_record(buf: bytes) -> Sample:
    r = _Reader(buf)
    seed, mode = struct.unpack("<QB", r.take(9))
    pixels = _decode_image(r.take(r.u32()))
    caption, instr, resp = r.ids(), r.ids(), r.ids()
    teacher = TeacherFeatureGrid(decode_grid(r.take(r.u32())), source="file")
    meta = json.loads(r.take(r.u32()))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes in record")
    placements = [Placement(*m) for m in meta]
    return Sample(pixels, caption, instr, resp, teacher, int(seed), CAPTION if mode == 0 else QA, placements)


def save_dataset(samples, path) -> None:
    vocab = "\n".join(VOCAB.words).encode()
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC + struct.pack("<III", DATASET_VERSION, len(samples), len(vocab)) + vocab)
        for s in samples:
            rec = encode_record(s)
            f.write(_U32.pack(len(rec)) + rec)


def gen_dataset(seed: int, n: int, mode: str, path, teacher_seed: int = 0, teacher_dim: int = 32) -> list[Sample]:
    samples = gen_samples(seed, n, mode, teacher_seed, teacher_dim)
    save_dataset(samples, path)
    return samples


def iter_dataset(path):
    """Stream samples from a dataset file in order."""
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    try:
        magic = r.take(4)
        if magic != DATASET_MAGIC:
            raise FormatError(f"magic: expected {DATASET_MAGIC!r}, found {magic!r}")
        version, n, vlen = struct.unpack("<III", r.take(12))
    except FormatError as e:
        raise FormatError(f"header: {e}") from None
    if version != DATASET_VERSION:
        raise FormatError(f"version: expected {DATASET_VERSION}, found {version}")
    words = r.take(vlen).decode().split("\n")
    if words != VOCAB.words:
        raise FormatError("vocabulary block does not match this build's vocabulary")
    for i in range(n):
        try:
            yield decode_record(r.take(r.u32()))
        except (FormatError, ValueError, OSError) as e:
            raise FormatError(f"record {i}: {e}") from None
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after record {n - 1}")


def load_dataset(path) -> list[Sample]:
    return list(iter_dataset(path))
