"""Alignment, language-modeling and combined objectives.

The alignment term for one granularity is the mean over query tokens of
``1 - cos(q_out_i, v_i)``; granularities are summed, then combined with the
LM loss as ``alpha * align + beta * lm``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from breen import numcore as nc
from breen.numcore import Tensor

COS_EPS = 1e-8


class DegenerateTargetError(ValueError):
    pass


@dataclass
class LossBreakdown:
    align_fine: float
    align_coarse: float
    align_total: float
    lm: float
    total: float
    alpha: float
    beta: float
    per_stride: dict = field(default_factory=dict)
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def record(self) -> dict:
        return {
            "align_fine": self.align_fine,
            "align_coarse": self.align_coarse,
            "align_total": self.align_total,
            "lm": self.lm,
            "total": self.total,
        }


def _row_cosine(q: Tensor, v: np.ndarray) -> Tensor:
    """Cosine between matching rows over the last axis; zero-norm ``q`` rows give 0."""
    v = np.asarray(v, dtype=q.dtype)
    v_norm = np.linalg.norm(v, axis=-1)
    if np.any(v_norm == 0):
        raise DegenerateTargetError("alignment target contains a zero-norm row")
    dot = nc.sum_(nc.mul(q, v), axis=-1)
    q_norm = nc.sqrt(nc.clamp_min(nc.sum_(nc.mul(q, q), axis=-1), COS_EPS**2))
    return nc.div(dot, nc.mul(q_norm, np.maximum(v_norm, COS_EPS)))


def align_loss_tensor(q_out: Tensor, v_target) -> Tensor:
    """Mean over all leading axes of ``1 - cos`` (tokens, and samples if batched)."""
    v_target = np.asarray(v_target)
    if q_out.shape != v_target.shape:
        raise ValueError(f"alignment shapes differ: {q_out.shape} vs {v_target.shape}")
    return nc.mean(nc.sub(1.0, _row_cosine(q_out, v_target)))


def align_loss(q_out, v_target) -> float:
    q = q_out if isinstance(q_out, Tensor) else nc.tensor(q_out, dtype=np.float64)
    return align_loss_tensor(q, v_target).item()


def total_align(per_stride: dict) -> float:
    """Plain sum over granularities."""
    return float(sum(per_stride.values()))


def next_token_view(logits: Tensor, labels: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Pair the logits at ``i`` with the label at ``i + 1`` (flattened over the batch)."""
    labels = np.asarray(labels)
    if logits.ndim == 2:
        logits = nc.reshape(logits, (1,) + logits.shape)
        labels = labels[None]
    b, length, v = logits.shape
    flat = nc.reshape(logits, (b * length, v))
    rows = (np.arange(b)[:, None] * length + np.arange(length - 1)[None, :]).reshape(-1)
    return nc.take_rows(flat, rows), labels[:, 1:].reshape(-1)


def lm_loss_tensor(logits: Tensor, labels, weights: np.ndarray | None = None) -> Tensor:
    """Cross-entropy at active labels (-1 = ignored), averaged over them unless
    per-position ``weights`` are supplied."""
    labels = np.asarray(labels)
    active = np.flatnonzero(labels >= 0)
    if active.size == 0:
        raise ValueError("lm_loss needs at least one active label")
    logp = nc.log_softmax_lastdim(nc.take_rows(logits, active))
    picked = nc.gather_last(logp, labels[active])
    if weights is None:
        return nc.neg(nc.mean(picked))
    w = np.asarray(weights, dtype=logits.dtype)[active]
    return nc.neg(nc.sum_(nc.mul(picked, w)))


def lm_loss(logits, labels) -> float:
    lg = logits if isinstance(logits, Tensor) else nc.tensor(logits, dtype=np.float64)
    return lm_loss_tensor(lg, labels).item()


def combined(align_total: float, lm: float, alpha: float, beta: float, per_stride=None) -> LossBreakdown:
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    per_stride = dict(per_stride or {})
    fine, coarse = _split_fine_coarse(per_stride)
    return LossBreakdown(fine, coarse, align_total, lm, alpha * align_total + beta * lm, alpha, beta, per_stride)


def _split_fine_coarse(per_stride: dict) -> tuple[float, float]:
    if not per_stride:
        return 0.0, 0.0
    finest = min(per_stride)
    return per_stride[finest], sum(v for s, v in per_stride.items() if s != finest)


def objective(output, targets: dict | None, alpha: float, beta: float) -> LossBreakdown:
    """Full training loss for a batch.

    ``targets`` maps stride -> (B, n_s, D_t) pooled teacher tokens. Each
    component is averaged per sample first, then over the batch.
    """
    seqs = output.sequences
    b = len(seqs)
    length = output.logits.shape[1]
    labels = np.full((b, length), -1, dtype=np.int64)
    for i, seq in enumerate(seqs):
        labels[i, : len(seq)] = seq.lm_labels

    terms = []
    lm_value = 0.0
    flat_logits, flat_labels = next_token_view(output.logits, labels)
    if (flat_labels >= 0).any():
        counts = (labels[:, 1:] >= 0).sum(axis=1)
        w = np.where(counts[:, None] > 0, 1.0 / np.maximum(counts, 1)[:, None] / b, 0.0)
        w = np.broadcast_to(w, labels[:, 1:].shape).reshape(-1)
        lm_t = lm_loss_tensor(flat_logits, flat_labels, w)
        lm_value = lm_t.item()
        if beta:
            terms.append(nc.mul(lm_t, beta))

    per_stride = {}
    align_terms = []
    for s, q in output.query_out.items():
        t = align_loss_tensor(q, targets[s])
        per_stride[s] = t.item()
        align_terms.append(t)
    align_total = total_align(per_stride)
    if align_terms and alpha:
        a = align_terms[0]
        for t in align_terms[1:]:
            a = nc.add(a, t)
        terms.append(nc.mul(a, alpha))

    breakdown = combined(align_total, lm_value, alpha, beta, per_stride)
    if terms:
        tot = terms[0]
        for t in terms[1:]:
            tot = nc.add(tot, t)
        breakdown.tensor = tot
    return breakdown
