"""Small reverse-mode autodiff engine over numpy arrays.

Every differentiable value is a :class:`Tensor`. Operations record their
parents plus a closure mapping the upstream gradient to one gradient per
parent; :func:`backward` replays the tape in reverse topological order and
accumulates into ``.grad`` of the tensors that require it.

Training runs in float32. Gradient checks switch to float64 with
:func:`precision`, because central differences are unreliable at 32 bits.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from breen import kernels

NORM_EPS = 1e-6
FD_EPS = 1e-4

_state = {"dtype": np.dtype(np.float32), "grad_enabled": True}


def get_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    """Leaf constructor; casts to the active precision unless ``dtype`` is given."""
    arr = np.array(data, dtype=dtype or get_dtype())
    return Tensor(arr, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_dtype()))


def _make(data, parents, backward, op) -> Tensor:
    track = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    keep = a.data >= floor
    out = np.where(keep, a.data, a.data.dtype.type(floor))
    return _make(out, (a,), lambda g: (g * keep,), "clamp_min")


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def bw(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return _make(out, (a,), bw, "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw, "gelu")


# ------------------------------------------------------------ reductions/shape


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(out, tuple(tensors), bw, "concat")


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather along axis 0 (embedding lookup, slot extraction)."""
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def bw(g):
        ga = np.zeros_like(a.data)
        if np.unique(idx).size == idx.size:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), bw, "take_rows")


def select(a: Tensor, i: int) -> Tensor:
    """``a[i]`` along axis 0, dropping that axis."""

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[i] = g
        return (ga,)

    return _make(a.data[i], (a,), bw, "select")


def merge_rows(n_rows: int, parts: Sequence[tuple[np.ndarray, Tensor]]) -> Tensor:
    """Inverse of ``take_rows`` for a partition: place each part's rows at its indices."""
    parts = [(np.asarray(i, dtype=np.intp), t) for i, t in parts]
    width = parts[0][1].shape[1:]
    out = np.zeros((n_rows,) + width, dtype=parts[0][1].dtype)
    for i, t in parts:
        out[i] = t.data

    def bw(g):
        return tuple(g[i] for i, _ in parts)

    return _make(out, tuple(t for _, t in parts), bw, "merge_rows")


def gather_last(a: Tensor, index) -> Tensor:
    """``out[i] = a[i, index[i]]`` for a 2-D ``a``."""
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(a.shape[0])
    out = a.data[rows, index]

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[rows, index] = g
        return (ga,)

    return _make(out, (a,), bw, "gather_last")


# ------------------------------------------------------------------ linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ------------------------------------------------------------------ fused ops


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable, True = allowed)
    forces disallowed entries to exactly zero."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def causal_softmax(x: Tensor, scale: float = 1.0) -> Tensor:
    """``softmax(scale * x)`` over square last axes with the upper triangle masked.

    Runs on the compiled kernel when available.
    """
    out = kernels.causal_softmax_forward(x.data, scale)

    def bw(g):
        return (kernels.causal_softmax_backward(out, np.asarray(g, dtype=out.dtype), scale),)

    return _make(out, (x,), bw, "causal_softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def rms_norm(x: Tensor, gain: Tensor, eps: float = NORM_EPS) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv
    out = xhat * gain.data
    d = xd.shape[-1]

    def bw(g):
        gx = ggain = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain

    return _make(out.astype(xd.dtype, copy=False), (x, gain), bw, "rms_norm")


def _rotate_half(x):
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(y):
    h = y.shape[-1] // 2
    return np.concatenate([y[..., h:], -y[..., :h]], axis=-1)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding on the last axis (half-split pairing)."""
    out = x.data * cos + _rotate_half(x.data) * sin

    def bw(g):
        return (g * cos + _rotate_half_t(g * sin),)

    return _make(out, (x,), bw, "rotary")


# ------------------------------------------------------------------- tape


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d leaf into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# --------------------------------------------------------------- oracles


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], theta: np.ndarray, eps: float = FD_EPS, coords=None
) -> np.ndarray:
    """Central differences of a scalar function, coordinate by coordinate.

    ``theta`` is perturbed in place and restored. ``coords`` restricts the
    check to a subset of flat indices; other entries are left at zero.
    """
    grad = np.zeros(theta.shape, dtype=np.float64)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(theta)
        flat[i] = orig - eps
        lo = f(theta)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Max abs difference scaled by the largest magnitude in either array."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(
    fn: Callable[..., Tensor], inputs: Iterable[np.ndarray], eps: float = FD_EPS
) -> float:
    """Compare backward against central differences for ``sum(fn(*inputs) * w)``
    with a fixed random weighting ``w``. Runs in float64; returns the worst
    relative error over all inputs."""
    with precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        out_shape = fn(*[tensor(a) for a in arrays]).shape
        w = np.random.default_rng(1234).standard_normal(out_shape)

        def scalar(*arrs):
            return float((fn(*[tensor(a) for a in arrs]).data * w).sum())

        leaves = [tensor(a, requires_grad=True) for a in arrays]
        backward(sum_(mul(fn(*leaves), w)))
        worst = 0.0
        for k, leaf in enumerate(leaves):

            def f(theta, k=k):
                arrs = list(arrays)
                arrs[k] = theta
                return scalar(*arrs)

            num = finite_difference_gradient(f, arrays[k].copy(), eps)
            ana = leaf.grad if leaf.grad is not None else np.zeros_like(num)
            worst = max(worst, rel_error(ana, num))
    return worst


def _gradcheck_cases():
    """Registered ops with random-input factories, used by the verify suite."""
    causal = np.tril(np.ones((5, 5), dtype=bool))
    ang = np.linspace(0.1, 1.3, 5 * 2).reshape(5, 2)
    cos = np.cos(np.concatenate([ang, ang], -1))
    sin = np.sin(np.concatenate([ang, ang], -1))
    idx = np.array([0, 2, 2, 4])
    return {
        "add": (lambda a, b: add(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal(4)]),
        "sub": (lambda a, b: sub(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))]),
        "mul": (lambda a, b: mul(a, b), lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
        "div": (lambda a, b: div(a, b), lambda r: [r.standard_normal((3, 4)), r.uniform(0.5, 2.0, (3, 4))]),
        "exp": (exp, lambda r: [r.standard_normal((3, 4))]),
        "log": (log, lambda r: [r.uniform(0.5, 2.0, (3, 4))]),
        "sqrt": (sqrt, lambda r: [r.uniform(0.5, 2.0, (3, 4))]),
        "tanh": (tanh, lambda r: [r.standard_normal((3, 4))]),
        "silu": (silu, lambda r: [r.standard_normal((3, 4))]),
        "gelu": (gelu, lambda r: [r.standard_normal((3, 4))]),
        "clamp_min": (lambda a: clamp_min(a, 0.0), lambda r: [r.choice([-1, 1], (3, 4)) * r.uniform(0.1, 1, (3, 4))]),
        "sum": (lambda a: sum_(a, axis=1), lambda r: [r.standard_normal((3, 4))]),
        "mean": (lambda a: mean(a, axis=0, keepdims=True), lambda r: [r.standard_normal((3, 4))]),
        "reshape": (lambda a: reshape(a, (4, 3)), lambda r: [r.standard_normal((3, 4))]),
        "transpose": (lambda a: transpose(a, (1, 0, 2)), lambda r: [r.standard_normal((2, 3, 4))]),
        "concat": (lambda a, b: concat([a, b], axis=0), lambda r: [r.standard_normal((2, 4)), r.standard_normal((3, 4))]),
        "take_rows": (lambda a: take_rows(a, idx), lambda r: [r.standard_normal((5, 3))]),
        "merge_rows": (
            lambda a, b: merge_rows(5, [(np.array([0, 3]), a), (np.array([1, 2, 4]), b)]),
            lambda r: [r.standard_normal((2, 3)), r.standard_normal((3, 3))],
        ),
        "select": (lambda a: select(a, 1), lambda r: [r.standard_normal((3, 2, 4))]),
        "gather_last": (lambda a: gather_last(a, np.array([1, 0, 3])), lambda r: [r.standard_normal((3, 4))]),
        "matmul": (matmul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
        "matmul_batched": (matmul, lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((4, 2))]),
        "softmax": (softmax_lastdim, lambda r: [r.standard_normal((3, 5))]),
        "softmax_masked": (lambda a: softmax_lastdim(a, causal), lambda r: [r.standard_normal((2, 5, 5))]),
        "causal_softmax": (lambda a: causal_softmax(a, 0.7), lambda r: [r.standard_normal((2, 3, 5, 5))]),
        "log_softmax": (log_softmax_lastdim, lambda r: [r.standard_normal((3, 5))]),
        "rms_norm": (rms_norm, lambda r: [r.standard_normal((3, 6)), r.uniform(0.5, 1.5, 6)]),
        "rotary": (lambda a: rotary(a, cos, sin), lambda r: [r.standard_normal((2, 5, 4))]),
    }


def gradcheck_suite(trials: int = 100, seed: int = 0) -> dict[str, float]:
    """Worst relative error per registered op over ``trials`` random draws."""
    rng = np.random.default_rng(seed)
    worst = {}
    for name, (fn, make) in _gradcheck_cases().items():
        worst[name] = max(check_gradients(fn, make(rng)) for _ in range(trials))
    return worst
