"""Small dense-tensor library with reverse-mode differentiation.

Arrays live in numpy buffers; every differentiable operation records its
parents and a backward rule on the output tensor.  ``Tensor.backward`` walks
the recorded graph in reverse topological order (the tape) and accumulates
gradients.  Slices are views: their gradients are written straight into the
parent's ``grad`` buffer at the sliced offsets, which is what lets a sliced
submodel train the shared supernet weights.
"""
from __future__ import annotations

import contextlib
import math
import os
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
# an invalid value is reported when a command applies the precision
_dtype = _PRECISIONS.get(os.environ.get("ELASTIC_SUPERNET_PRECISION", "f32"), np.float32)
_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def set_precision(name: str) -> None:
    global _dtype
    if name not in _PRECISIONS:
        raise ConfigError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def get_dtype():
    return _dtype


def precision_name() -> str:
    return "f64" if _dtype == np.float64 else "f32"


@contextlib.contextmanager
def precision(name: str):
    old = precision_name()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation


class MacCounter:
    def __init__(self) -> None:
        self.macs = 0
        self.paused = 0


_counter: MacCounter | None = None


@contextlib.contextmanager
def counting():
    """Count MACs of every matmul executed inside the block."""
    global _counter
    old = _counter
    _counter = MacCounter()
    try:
        yield _counter
    finally:
        _counter = old


@contextlib.contextmanager
def uncounted():
    """Exclude matmuls inside the block from an enclosing ``counting`` scope."""
    if _counter is None:
        yield
        return
    _counter.paused += 1
    try:
        yield
    finally:
        _counter.paused -= 1


# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def _accumulate(self, g, index=None) -> None:
        if self.grad is None:
            if index is None:
                self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=self.data.dtype)
                return
            self.grad = np.zeros_like(self.data)
        if index is None:
            self.grad += g
        elif _is_basic_index(index):
            self.grad[index] += g
        else:
            np.add.at(self.grad, index, g)

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(tape(self)):
            if node._backward is None or node.grad is None:
                continue
            for parent, g, index in node._backward(node.grad):
                if parent.requires_grad and g is not None:
                    parent._accumulate(g, index)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return mul(tsum(self, axis, keepdims), 1.0 / n)


def tape(root: Tensor) -> list[Tensor]:
    """Recorded operations reachable from ``root`` in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in reversed(node._parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_basic_index(index) -> bool:
    if not isinstance(index, tuple):
        index = (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in index)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.grad = None
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a} and {b}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    out = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape), None), (b, _unbroadcast(g, b.shape), None))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product; a python number as ``b`` acts as a scale."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * a.data.dtype.type(c), (a,), lambda g: ((a, g * c, None),))
    _broadcast_shape(a.shape, b.shape)
    out = a.data * b.data

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape), None),
            (b, _unbroadcast(g * a.data, b.shape), None),
        )

    return _make(out, (a, b), backward)


def scale(a, c: float) -> Tensor:
    return mul(a, float(c))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    v = x.data
    c = math.sqrt(2.0 / math.pi)
    inner = c * (v + 0.044715 * v * v * v)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def backward(g):
        d_inner = c * (1.0 + 3 * 0.044715 * v * v)
        return ((x, g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * d_inner), None),)

    return _make(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def backward(g):
        return ((x, g * out * (1.0 - out), None),)

    return _make(out, (x,), backward)


def clip(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp; gradient passes wherever the input lies inside [lo, hi]."""
    v = x.data
    out = np.clip(v, lo, hi)
    inside = np.ones(v.shape, dtype=bool)
    if lo is not None:
        inside &= v >= lo
    if hi is not None:
        inside &= v <= hi

    def backward(g):
        return ((x, g * inside, None),)

    return _make(out, (x,), backward)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Value of ``hard`` exactly, gradient of ``soft``.

    Equivalent to ``hard - detach(soft) + soft`` without the rounding error
    that expression picks up in floating point.
    """
    hard = np.asarray(hard, dtype=soft.data.dtype)
    if hard.shape != soft.shape:
        raise DimensionError(f"hard {hard.shape} vs soft {soft.shape}")
    return _make(hard.copy(), (soft,), lambda g: ((soft, g, None),))


def prefix_mask(count: Tensor, k: int) -> Tensor:
    """Length-k nested mask with the first ``round(count)`` entries set to 1.

    Backward treats the mask as the piecewise-linear ramp clamp(count - j, 0, 1)
    and averages its one-sided slopes at the integer count: the last active
    and the first inactive entry each receive half of d(mask)/d(count).
    """
    if count.data.size != 1:
        raise DimensionError(f"count must be a scalar, got shape {count.shape}")
    c = int(np.floor(float(count.data.reshape(())) + 0.5))
    c = min(max(c, 0), k)
    out = np.zeros(k, dtype=count.data.dtype)
    out[:c] = 1.0
    slope = np.zeros(k, dtype=count.data.dtype)
    if c - 1 >= 0:
        slope[c - 1] = 0.5
    if c < k:
        slope[c] = 0.5

    def backward(g):
        return ((count, np.asarray(np.sum(g * slope)).reshape(count.shape), None),)

    return _make(out, (count,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b`` over leading dimensions (numpy broadcasting)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    batch = _broadcast_shape(a.shape[:-2], b.shape[:-2])
    k = a.shape[-1]
    flat = b.ndim == 2
    if flat:
        # fold the leading dims of ``a`` into rows: one GEMM, and the weight
        # gradient needs no per-batch reduction
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data
    if _counter is not None and not _counter.paused:
        m = a.shape[-2]
        n = b.shape[-1]
        _counter.macs += int(np.prod(batch, dtype=np.int64)) * m * k * n

    def backward(g):
        if flat:
            g2 = g.reshape(-1, b.shape[-1])
            return ((a, (g2 @ b.data.T).reshape(a.shape), None), (b, a2.T @ g2, None))
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ((a, _unbroadcast(ga, a.shape), None), (b, _unbroadcast(gb, b.shape), None))

    return _make(out, (a, b), backward)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    return _make(out, (x,), lambda g: ((x, g, index),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: ((x, g.reshape(x.shape), None),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _make(out, (x,), lambda g: ((x, g.transpose(inv), None),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((x, np.broadcast_to(g, x.shape), None),)

    return _make(out, (x,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        grads = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            grads.append((t, g[tuple(sl)], None))
        return grads

    return _make(out, tensors, backward)


# ---------------------------------------------------------------------------
# normalisation and losses


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6, mask=None) -> Tensor:
    """Normalise over the last axis, then apply the affine transform.

    ``mask`` (constant 0/1 weights over the last axis) restricts the mean and
    variance to the active channels; it is treated as data, not differentiated.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    e = x.shape[-1]
    if gamma.shape != (e,) or beta.shape != (e,):
        raise DimensionError(f"layernorm params {gamma.shape}/{beta.shape} for width {e}")
    v = x.data
    if mask is None:
        w = None
        n = e
        mu = v.mean(axis=-1, keepdims=True)
        xc = v - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
    else:
        w = np.asarray(mask, dtype=v.dtype)
        n = max(float(w.sum()), 1.0)
        mu = (v * w).sum(axis=-1, keepdims=True) / n
        xc = v - mu
        var = (w * xc * xc).sum(axis=-1, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        ww = 1.0 if w is None else w
        s1 = gx_hat.sum(axis=-1, keepdims=True)
        s2 = (gx_hat * xhat).sum(axis=-1, keepdims=True)
        gx = inv * (gx_hat - ww * s1 / n - ww * xhat * s2 / n)
        lead = tuple(range(g.ndim - 1))
        return (
            (x, gx, None),
            (gamma, (g * xhat).sum(axis=lead), None),
            (beta, g.sum(axis=lead), None),
        )

    return _make(out, (x, gamma, beta), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    v = x.data
    z = np.exp(v - v.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((x, out * (g - (g * out).sum(axis=-1, keepdims=True)), None),)

    return _make(out, (x,), backward)


def log_softmax_np(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1, keepdims=True)
    return v - m - np.log(np.exp(v - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits`` (B x C) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    logp = log_softmax_np(logits.data)
    rows = np.arange(labels.shape[0])
    out = np.asarray(-logp[rows, labels].mean(), dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((logits, g * p / labels.shape[0], None),)

    return _make(out, (logits,), backward)
