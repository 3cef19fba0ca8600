"""Token layouts for the three training stages.

Pretraining (and pre-aligning)::

    [IMAGE ...][QUERY_FINE ...][QUERY_COARSE ...][TEXT_GEN ...]

Instruction tuning moves the instruction in front of the queries so that,
under the causal mask, the queries can read it::

    [IMAGE ...][TEXT_INSTR ...][QUERY ...][TEXT_GEN ...]

``lm_labels[i]`` is the token id at position ``i`` wherever position ``i``
carries LM loss, else -1. The prediction for position ``i`` comes from the
logits at ``i - 1`` (see :func:`breen.losses.next_token_view`), so labels
never sit on image, query or instruction positions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from breen.numcore import Tensor, concat


class Role(enum.IntEnum):
    IMAGE = 0
    QUERY_FINE = 1
    QUERY_COARSE = 2
    TEXT_INSTR = 3
    TEXT_GEN = 4


class Stage(str, enum.Enum):
    PREALIGN = "prealign"
    PRETRAIN = "pretrain"
    SFT = "sft"


IMAGE_SIDE = (Role.IMAGE, Role.QUERY_FINE, Role.QUERY_COARSE)


@dataclass
class AssembledSequence:
    roles: np.ndarray  # (L,) Role values
    lm_labels: np.ndarray  # (L,) int, -1 = no loss
    token_ids: np.ndarray  # (L,) int, -1 on non-text positions
    query_slots: dict[int, tuple[int, int]]  # stride -> [start, end), in sequence order
    stage: Stage
    embeddings: Tensor | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.roles)

    @property
    def n_image(self) -> int:
        return int((self.roles == Role.IMAGE).sum())

    def role_counts(self) -> dict[Role, int]:
        return {r: int((self.roles == r).sum()) for r in Role}


def _query_roles(blocks) -> list[Role]:
    finest = min(s for s, _ in blocks) if blocks else None
    roles = []
    for s, n in blocks:
        roles += [Role.QUERY_FINE if s == finest else Role.QUERY_COARSE] * n
    return roles


def _block_lengths(query_embeds) -> list[tuple[int, int]]:
    return [(s, q if isinstance(q, int) else q.shape[0]) for s, q in query_embeds]


def _build(parts, stage, query_embeds, embed_text, image_tokens) -> AssembledSequence:
    roles, ids, labels = [], [], []
    slots = {}
    for kind, payload in parts:
        if kind == "image":
            n = payload
            roles += [Role.IMAGE] * n
            ids += [-1] * n
            labels += [-1] * n
        elif kind == "query":
            block_roles = _query_roles(payload)
            for s, n in payload:
                slots[s] = (len(roles), len(roles) + n)
                roles += block_roles[: n]
                block_roles = block_roles[n:]
                ids += [-1] * n
                labels += [-1] * n
        else:
            toks, role, supervised = payload
            roles += [role] * len(toks)
            ids += list(toks)
            labels += list(toks) if supervised else [-1] * len(toks)
    seq = AssembledSequence(
        roles=np.array(roles, dtype=np.int8),
        lm_labels=np.array(labels, dtype=np.int64),
        token_ids=np.array(ids, dtype=np.int64),
        query_slots=slots,
        stage=stage,
    )
    if image_tokens is not None and embed_text is not None:
        seq.embeddings = _embed(seq, parts, image_tokens, query_embeds, embed_text)
    return seq


def _embed(seq, parts, image_tokens, query_embeds, embed_text) -> Tensor:
    pieces = []
    for kind, payload in parts:
        if kind == "image":
            pieces.append(image_tokens)
        elif kind == "query":
            pieces.extend(q for _, q in query_embeds)
        elif len(payload[0]):
            pieces.append(embed_text(np.asarray(payload[0])))
    return concat(pieces, axis=0)


def assemble_pretrain(
    image_tokens, query_embeds, caption_ids, embed_text=None, stage: Stage = Stage.PRETRAIN
) -> AssembledSequence:
    """Caption layout: image, queries (in the given block order), caption.

    ``image_tokens`` is a Tensor of shape (n, d) or just the count ``n``;
    ``query_embeds`` is a list of ``(stride, Tensor | length)`` blocks.
    Embeddings are attached only when tensors and ``embed_text`` are given.
    """
    if len(caption_ids) == 0:
        raise ValueError("caption must contain at least one token")
    n_img = image_tokens if isinstance(image_tokens, int) else image_tokens.shape[0]
    blocks = _block_lengths(query_embeds)
    parts = [("image", n_img), ("query", blocks), ("text", (list(caption_ids), Role.TEXT_GEN, True))]
    tokens = None if isinstance(image_tokens, int) else image_tokens
    return _build(parts, stage, query_embeds, embed_text, tokens)


def assemble_sft(image_tokens, query_embeds, instr_ids, resp_ids, embed_text=None) -> AssembledSequence:
    """Instruction layout: image, instruction, queries, response; loss on the response only."""
    if len(resp_ids) == 0:
        raise ValueError("response must contain at least one token")
    n_img = image_tokens if isinstance(image_tokens, int) else image_tokens.shape[0]
    blocks = _block_lengths(query_embeds)
    parts = [
        ("image", n_img),
        ("text", (list(instr_ids), Role.TEXT_INSTR, False)),
        ("query", blocks),
        ("text", (list(resp_ids), Role.TEXT_GEN, True)),
    ]
    tokens = None if isinstance(image_tokens, int) else image_tokens
    return _build(parts, Stage.SFT, query_embeds, embed_text, tokens)


def assemble_text(ids, embed_text=None) -> AssembledSequence:
    """Text-only sequence (no image, no queries); the first token carries no label."""
    if len(ids) == 0:
        raise ValueError("text must contain at least one token")
    ids = list(ids)
    seq = AssembledSequence(
        roles=np.full(len(ids), Role.TEXT_GEN, dtype=np.int8),
        lm_labels=np.array([-1] + ids[1:], dtype=np.int64),
        token_ids=np.array(ids, dtype=np.int64),
        query_slots={},
        stage=Stage.PRETRAIN,
    )
    if embed_text is not None:
        seq.embeddings = embed_text(np.asarray(ids))
    return seq


def causal_mask(length: int) -> np.ndarray:
    """``mask[i, j]`` is True iff position ``i`` may attend to position ``j`` (``j <= i``)."""
    if length < 1:
        raise ValueError("sequence length must be positive")
    return np.tril(np.ones((length, length), dtype=bool))


def modality_route_mask(roles) -> np.ndarray:
    """True where the image expert handles the position (image and query tokens)."""
    roles = np.asarray(roles)
    return (roles == Role.IMAGE) | (roles == Role.QUERY_FINE) | (roles == Role.QUERY_COARSE)
