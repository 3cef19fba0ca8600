"""Hot attention kernels with a compiled backend and a numpy fallback.

The compiled module is used when it imports; set ``BREEN_PURE_PYTHON=1`` to
force the fallback. ``BACKEND`` names the active choice.
"""

from __future__ import annotations

import os

import numpy as np


def causal_softmax_forward_np(x: np.ndarray, scale: float) -> np.ndarray:
    length = x.shape[-1]
    z = x * x.dtype.type(scale)
    z += np.triu(np.full((length, length), -np.inf, dtype=x.dtype), 1)
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def causal_softmax_backward_np(p: np.ndarray, g: np.ndarray, scale: float) -> np.ndarray:
    # p is exactly zero above the diagonal, so the result is too
    t = g * p
    d = t.sum(axis=-1, keepdims=True)
    t -= p * d
    t *= t.dtype.type(scale)
    return t


def _as3d(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a).reshape(-1, a.shape[-2], a.shape[-1])


try:
    if os.environ.get("BREEN_PURE_PYTHON"):
        raise ImportError("fallback forced")
    from breen import _ckernels
except ImportError:
    _ckernels = None

BACKEND = "compiled" if _ckernels is not None else "numpy"


def causal_softmax_forward(x: np.ndarray, scale: float) -> np.ndarray:
    """softmax(scale * x) over the last axis with entries above the diagonal masked out."""
    if _ckernels is None or x.dtype not in (np.float32, np.float64):
        return causal_softmax_forward_np(x, scale)
    x3 = _as3d(x)
    out = np.empty_like(x3)
    _ckernels.causal_softmax_forward(x3, float(scale), out)
    return out.reshape(x.shape)


def causal_softmax_backward(p: np.ndarray, g: np.ndarray, scale: float) -> np.ndarray:
    if _ckernels is None or p.dtype not in (np.float32, np.float64) or g.dtype != p.dtype:
        return causal_softmax_backward_np(p, g, scale)
    p3, g3 = _as3d(p), _as3d(g)
    out = np.empty_like(p3)
    _ckernels.causal_softmax_backward(p3, g3, float(scale), out)
    return out.reshape(p.shape)
