"""Toy encoder-free multimodal decoder with a modality-routed FFN.

Image patches go through a two-layer MLP straight into the decoder. Learnable
query blocks (one per pooling stride) sit between the image and the text.
Every layer shares one attention over all positions, but its FFN has two
copies: ``text_ffn`` for text positions and ``image_ffn`` for image and
query positions. The image expert starts as a bitwise copy of the text FFN.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from breen import numcore as nc
from breen.numcore import Tensor
from breen.sequence import AssembledSequence, modality_route_mask
from breen.teacher import FINE_FIRST, GeometryError, order_strides

CONCAT = "concat"
AVGPOOL = "avgpool"


@dataclass
class BreenConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 64
    ffn_hidden: int = 128
    patch: int = 28
    channels: int = 3
    canvas: int = 336
    teacher_grid: int = 24
    strides: list = field(default_factory=lambda: [3, 4])
    teacher_dim: int = 32
    alpha: float = 1.0
    beta: float = 1.0
    seed: int = 0
    use_image_expert: bool = True
    granularity_order: str = FINE_FIRST
    align_method: str = CONCAT
    per_stride_proj: bool = False
    rope_base: float | None = None  # None: match the patch-grid width, see effective_rope_base

    def __post_init__(self):
        self.strides = list(self.strides)
        self.validate()

    def validate(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary encoding")
        if self.canvas % self.patch:
            raise GeometryError(f"patch {self.patch} does not divide canvas {self.canvas}")
        for s in self.strides:
            if s < 1 or self.teacher_grid % s:
                raise GeometryError(f"stride {s} does not divide teacher grid {self.teacher_grid}")
        if len(set(self.strides)) != len(self.strides):
            raise ValueError(f"duplicate strides {self.strides}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.rope_base is not None and self.rope_base <= 0:
            raise ValueError("rope_base must be positive")
        if self.align_method not in (CONCAT, AVGPOOL):
            raise ValueError(f"unknown align_method {self.align_method!r}")
        if self.align_method == AVGPOOL and self.strides:
            fine = min(self.strides)
            if any(s % fine for s in self.strides):
                raise GeometryError("avgpool alignment needs every stride to be a multiple of the finest")

    @property
    def ordered_strides(self) -> list[int]:
        return order_strides(self.strides, self.granularity_order)

    @property
    def query_strides(self) -> list[int]:
        """Strides that own a learnable query block."""
        if self.align_method == AVGPOOL and self.strides:
            return [min(self.strides)]
        return self.ordered_strides

    def query_length(self, stride: int) -> int:
        return (self.teacher_grid // stride) ** 2

    @property
    def n_image_tokens(self) -> int:
        return (self.canvas // self.patch) ** 2

    @property
    def effective_rope_base(self) -> float:
        """Rotary base; by default chosen so rotary pair 1 turns once per patch row.

        Image tokens are flattened row-major, so with that period every patch in
        a column shares the pair-1 phase and attention can select by column.
        """
        if self.rope_base is not None:
            return float(self.rope_base)
        half = self.d_model // self.n_heads // 2
        return (self.canvas // self.patch / (2 * math.pi)) ** half

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BreenConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ModelOutput:
    logits: Tensor  # (B, L, V)
    query_out: dict  # stride -> Tensor (B, n_s, D_t)
    sequences: list
    attentions: list | None = None  # per layer (B, H, L, L) arrays


def group_of(name: str) -> str:
    """Parameter group used by the freeze policies."""
    parts = name.split(".")
    if parts[0] == "layers":
        sub = parts[2]
        return f"layers.{parts[1]}.{'norms' if sub.endswith('_norm') else sub}"
    return parts[0]


def _ffn_names(prefix: str) -> list[str]:
    return [f"{prefix}.w_gate", f"{prefix}.w_up", f"{prefix}.w_down"]


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, (H/P)*(W/P), P*P*C), patches row-major."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise GeometryError(f"patch {patch} does not divide image {h}x{w}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch * patch * c)


class BreenModel:
    def __init__(self, config: BreenConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # ---------------------------------------------------------------- params

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for name in self.params:
            out.setdefault(group_of(name), []).append(name)
        return out

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "BreenModel":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return BreenModel(self.config, params)

    def copy(self) -> "BreenModel":
        return self.astype(next(iter(self.params.values())).dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def init_image_expert(self):
        """Copy every layer's text FFN into its image expert."""
        for i in range(self.config.n_layers):
            for src, dst in zip(_ffn_names(f"layers.{i}.text_ffn"), _ffn_names(f"layers.{i}.image_ffn")):
                if dst in self.params:
                    self.params[dst].data = self.params[src].data.copy()

    # --------------------------------------------------------------- embedding

    def patch_embed(self, images) -> Tensor:
        """Pixels (B, H, W, C) or (H, W, C) -> tokens (B, n, d_model)."""
        patches = patchify(images, self.config.patch).astype(self.params["patch_mlp.w1"].dtype)
        x = nc.tensor(patches, dtype=patches.dtype)
        h = nc.gelu(nc.linear(x, self["patch_mlp.w1"], self["patch_mlp.b1"]))
        return nc.linear(h, self["patch_mlp.w2"], self["patch_mlp.b2"])

    def embed_tokens(self, ids) -> Tensor:
        return nc.take_rows(self["token_embedding"], np.asarray(ids))

    def query_blocks(self) -> list[tuple[int, Tensor]]:
        return [(s, self[f"queries.s{s}"]) for s in self.config.query_strides]

    # ------------------------------------------------------------------ layers

    def _ffn(self, h: Tensor, prefix: str) -> Tensor:
        # a one-row matmul goes through gemv, which rounds differently from gemm
        single = h.shape[0] == 1
        if single:
            h = nc.take_rows(h, [0, 0])
        gate = nc.silu(nc.matmul(h, self[f"{prefix}.w_gate"]))
        up = nc.matmul(h, self[f"{prefix}.w_up"])
        out = nc.matmul(nc.mul(gate, up), self[f"{prefix}.w_down"])
        return nc.take_rows(out, [0]) if single else out

    def ffn_route(self, hidden: Tensor, route: np.ndarray, layer: int) -> Tensor:
        """Apply exactly one expert per row: image expert where ``route`` is True."""
        route = np.asarray(route, dtype=bool).reshape(-1)
        if not self.config.use_image_expert:
            return self._ffn(hidden, f"layers.{layer}.text_ffn")
        parts = []
        for flag, prefix in ((True, "image_ffn"), (False, "text_ffn")):
            idx = np.flatnonzero(route == flag)
            if idx.size:
                rows = self._ffn(nc.take_rows(hidden, idx), f"layers.{layer}.{prefix}")
                parts.append((idx, rows))
        return nc.merge_rows(hidden.shape[0], parts)

    def _rope(self, length: int, dtype):
        dh = self.config.d_model // self.config.n_heads
        half = dh // 2
        inv = 1.0 / (self.config.effective_rope_base ** (np.arange(half) / half))
        ang = np.arange(length)[:, None] * inv[None, :]
        ang = np.concatenate([ang, ang], axis=-1)
        return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)

    def _attention(self, x: Tensor, layer: int, rope, capture: list | None) -> Tensor:
        cfg = self.config
        b, length, d = x.shape
        nh, dh = cfg.n_heads, d // cfg.n_heads
        h = nc.rms_norm(x, self[f"layers.{layer}.attn_norm"])
        qkv = nc.matmul(h, self[f"layers.{layer}.attn.wqkv"])
        qkv = nc.transpose(nc.reshape(qkv, (b, length, 3, nh, dh)), (2, 0, 3, 1, 4))
        q, k, v = (nc.select(qkv, i) for i in range(3))
        q = nc.rotary(q, *rope)
        k = nc.rotary(k, *rope)
        probs = nc.causal_softmax(nc.matmul(q, nc.swap_last(k)), 1.0 / math.sqrt(dh))
        if capture is not None:
            capture.append(probs.data.copy())
        o = nc.transpose(nc.matmul(probs, v), (0, 2, 1, 3))
        return nc.matmul(nc.reshape(o, (b, length, d)), self[f"layers.{layer}.attn.wo"])

    # ----------------------------------------------------------------- forward

    def embed_sequence(self, seq: AssembledSequence, image_tokens: Tensor | None) -> Tensor:
        """Embeddings for a layout produced without tensors."""
        pieces, pos, length = [], 0, len(seq)
        blocks = dict(self.query_blocks())
        starts = {start: s for s, (start, _) in seq.query_slots.items()}
        while pos < length:
            role = seq.roles[pos]
            end = pos
            while end < length and seq.roles[end] == role:
                end += 1
            if pos in starts:
                s = starts[pos]
                end = seq.query_slots[s][1]
                pieces.append(blocks[s])
            elif role == 0:
                pieces.append(image_tokens)
            else:
                pieces.append(self.embed_tokens(seq.token_ids[pos:end]))
            pos = end
        return nc.concat(pieces, axis=0)

    def forward(self, seqs, capture_attn: bool = False) -> ModelOutput:
        if isinstance(seqs, AssembledSequence):
            seqs = [seqs]
        cfg = self.config
        for seq in seqs:
            if seq.embeddings is None:
                raise ValueError("sequence has no embeddings; assemble it with model tensors")
            got = sorted(seq.query_slots)
            if got and got != sorted(cfg.query_strides):
                raise ValueError(f"sequence query strides {got} do not match config {cfg.query_strides}")
            for s, (a, b_) in seq.query_slots.items():
                if b_ - a != cfg.query_length(s):
                    raise ValueError(f"query block for stride {s} has {b_ - a} slots, expected {cfg.query_length(s)}")
        b = len(seqs)
        length = max(len(s) for s in seqs)
        d = cfg.d_model
        dtype = self["token_embedding"].dtype

        rows = []
        for seq in seqs:
            rows.append(seq.embeddings)
            if len(seq) < length:
                rows.append(nc.Tensor(np.zeros((length - len(seq), d), dtype=dtype)))
        x = nc.reshape(nc.concat(rows, axis=0), (b, length, d))

        route = np.zeros((b, length), dtype=bool)
        for i, seq in enumerate(seqs):
            route[i, : len(seq)] = modality_route_mask(seq.roles)

        rope = self._rope(length, dtype)
        capture = [] if capture_attn else None
        for layer in range(cfg.n_layers):
            x = nc.add(x, self._attention(x, layer, rope, capture))
            h = nc.rms_norm(x, self[f"layers.{layer}.ffn_norm"])
            ffn = self.ffn_route(nc.reshape(h, (b * length, d)), route, layer)
            x = nc.add(x, nc.reshape(ffn, (b, length, d)))

        hf = nc.rms_norm(x, self["final_norm"])
        logits = nc.matmul(hf, self["lm_head.w"])
        query_out = self._query_outputs(nc.reshape(hf, (b * length, d)), seqs, length)
        return ModelOutput(logits, query_out, list(seqs), capture)

    def _project(self, rows: Tensor, stride: int) -> Tensor:
        key = f"query_proj.s{stride}" if self.config.per_stride_proj else "query_proj"
        return nc.linear(rows, self[f"{key}.w"], self[f"{key}.b"])

    def _query_outputs(self, hf_flat: Tensor, seqs, length) -> dict:
        cfg = self.config
        if not seqs[0].query_slots:
            return {}
        b = len(seqs)
        out = {}
        for s in cfg.query_strides:
            idx = np.concatenate([i * length + np.arange(*seq.query_slots[s]) for i, seq in enumerate(seqs)])
            n = cfg.query_length(s)
            out[s] = nc.reshape(self._project(nc.take_rows(hf_flat, idx), s), (b, n, cfg.teacher_dim))
        if cfg.align_method == AVGPOOL:
            fine = cfg.query_strides[0]
            n = cfg.teacher_grid // fine
            for s in cfg.ordered_strides:
                if s == fine:
                    continue
                f = s // fine
                m = n // f
                grid = nc.reshape(out[fine], (b, m, f, m, f, cfg.teacher_dim))
                pooled = nc.mean(grid, axis=(2, 4))
                out[s] = nc.reshape(pooled, (b, m * m, cfg.teacher_dim))
            out = {s: out[s] for s in cfg.ordered_strides}
        return out


def init_parameters(config: BreenConfig) -> BreenModel:
    """Scaled-normal init (std 0.02, output maps 0.02/sqrt(2 n_layers)); the
    image expert is then copied from the text FFN."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    std = 0.02
    out_std = std / math.sqrt(2 * max(cfg.n_layers, 1))
    d, h = cfg.d_model, cfg.ffn_hidden
    p: dict[str, np.ndarray] = {}

    def normal(shape, s=std):
        return rng.standard_normal(shape) * s

    p["token_embedding"] = normal((cfg.vocab_size, d))
    fan_in = cfg.patch * cfg.patch * cfg.channels
    p["patch_mlp.w1"] = normal((fan_in, d))
    p["patch_mlp.b1"] = np.zeros(d)
    p["patch_mlp.w2"] = normal((d, d))
    p["patch_mlp.b2"] = np.zeros(d)
    for s in cfg.query_strides:
        p[f"queries.s{s}"] = normal((cfg.query_length(s), d))
    for i in range(cfg.n_layers):
        p[f"layers.{i}.attn_norm"] = np.ones(d)
        p[f"layers.{i}.attn.wqkv"] = normal((d, 3 * d))
        p[f"layers.{i}.attn.wo"] = normal((d, d), out_std)
        p[f"layers.{i}.ffn_norm"] = np.ones(d)
        p[f"layers.{i}.text_ffn.w_gate"] = normal((d, h))
        p[f"layers.{i}.text_ffn.w_up"] = normal((d, h))
        p[f"layers.{i}.text_ffn.w_down"] = normal((h, d), out_std)
        if cfg.use_image_expert:
            for name in _ffn_names(f"layers.{i}.image_ffn"):
                p[name] = np.zeros_like(p[name.replace("image_ffn", "text_ffn")])
    p["final_norm"] = np.ones(d)
    heads = [f"query_proj.s{s}" for s in cfg.query_strides] if cfg.per_stride_proj else ["query_proj"]
    if cfg.strides:
        for key in heads:
            p[f"{key}.w"] = normal((d, cfg.teacher_dim))
            p[f"{key}.b"] = np.zeros(cfg.teacher_dim)
    p["lm_head.w"] = normal((d, cfg.vocab_size))

    params = {k: Tensor(v.astype(np.float32), requires_grad=True) for k, v in p.items()}
    model = BreenModel(cfg, params)
    model.init_image_expert()
    return model
