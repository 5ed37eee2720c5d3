"""Small reverse-mode autodiff engine over numpy arrays.

Only the operations the transformer needs are provided. Every op records a
vector-Jacobian product on its output tensor; ``backward`` walks the recorded
graph once in reverse topological order.

Storage is float32 by default. Matmul inner products and reductions are
accumulated in float64 and cast back. ``precision(np.float64)`` switches the
storage dtype for high-accuracy gradient checks.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

# additive mask sentinel: exp(NEG_INF - max) underflows to exactly 0
NEG_INF = float(np.finfo(np.float32).min)

GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715

_state = threading.local()
_counter = itertools.count()


class NumericError(ArithmeticError):
    """Non-finite value produced by a forward op, or an all-masked softmax row."""


def _dtype() -> np.dtype:
    return getattr(_state, "dtype", np.float32)


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    old = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    old = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


def current_dtype():
    return _dtype()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _dtype():
            arr = arr.astype(_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._id = next(_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def backward(self):
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite output")


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    data = np.asarray(data)
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0, dtype=np.float64)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True, dtype=np.float64)
    return grad


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):  # _make reports non-finite output
        out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), vjp, "div")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    sig = 1.0 / (1.0 + np.exp(-x))
    out = (x * sig).astype(_dtype())

    def vjp(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return _make(out, (a,), vjp, "silu")


def gelu(a) -> Tensor:
    """GeLU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    inner = GELU_C * (x + GELU_A * x ** 3)
    th = np.tanh(inner)
    out = (0.5 * x * (1.0 + th)).astype(_dtype())

    def vjp(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), vjp, "gelu")


# ----------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    """Batched matmul with numpy broadcasting; inner products in float64."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = np.matmul(a64, b64).astype(_dtype())

    def vjp(g):
        g64 = g.astype(np.float64)
        ga = np.matmul(g64, np.swapaxes(b64, -1, -2))
        gb = np.matmul(np.swapaxes(a64, -1, -2), g64)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp, "matmul")


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def reduce_sum(a, axes=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(_dtype())

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), vjp, "sum")


def mean(a, axes=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(_dtype())

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape),)

    return _make(out, (a,), vjp, "mean")


def var(a, axes=None, keepdims: bool = False) -> Tensor:
    """Population variance over ``axes``."""
    a = as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    x = a.data.astype(np.float64)
    centered = x - x.mean(axis=axes, keepdims=True)
    out = (centered ** 2).mean(axis=axes, keepdims=keepdims).astype(_dtype())

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * (2.0 / n) * centered,)

    return _make(out, (a,), vjp, "var")


def softmax(a, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` is additive (0 or NEG_INF), broadcastable."""
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    if mask is not None:
        mask = np.asarray(mask)
        if np.any(np.all(mask <= NEG_INF, axis=-1)):
            raise NumericError("softmax: a row has every entry masked")
        # x + NEG_INF stays finite and exp() of it underflows to exactly 0
        x = x + mask
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=-1, keepdims=True)
    out = p.astype(_dtype())

    def vjp(g):
        g64 = g.astype(np.float64)
        return (p * (g64 - (g64 * p).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), vjp, "softmax")


# ----------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _make(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def split(a, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    a = as_tensor(a)
    axis = axis % a.ndim
    if np.sum(sizes) != a.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    starts = np.concatenate([[0], np.cumsum(sizes)])
    outs = []
    for lo, hi in zip(starts[:-1], starts[1:]):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(int(lo), int(hi))
        outs.append(getitem(a, tuple(idx)))
    return outs


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if _has_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), vjp, "getitem")


def _has_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def gather_rows(a, index) -> Tensor:
    """Rows of a 2-D table by integer index (embedding lookup)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2:
        raise ValueError("gather_rows expects a 2-D table")

    def vjp(g):
        full = np.zeros(a.shape, dtype=np.float64)
        np.add.at(full, index.reshape(-1), g.reshape(-1, a.shape[1]))
        return (full,)

    return _make(a.data[index], (a,), vjp, "gather_rows")


# ----------------------------------------------------------------------------
# fused helper used by the model; its VJP is checked like the primitives


def rms_normalize(a, eps: float) -> Tensor:
    """x / sqrt(mean(x^2, last axis) + eps)."""
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    y = x * inv
    d = x.shape[-1]

    def vjp(g):
        g64 = g.astype(np.float64)
        return (inv * (g64 - y * (g64 * y).sum(axis=-1, keepdims=True) / d),)

    return _make((x * inv).astype(_dtype()), (a,), vjp, "rms_normalize")


# ----------------------------------------------------------------------------
# reverse pass


class Graph:
    """Recorded operations reachable from one output, in topological order."""

    def __init__(self, output: Tensor):
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [output]
        while stack:
            t = stack.pop()
            if t._id in seen:
                continue
            seen.add(t._id)
            nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
        # ids are assigned at creation, so parents always carry smaller ids
        nodes.sort(key=lambda t: t._id)
        for t in nodes:
            for p in t._parents:
                assert p._id < t._id, "graph is not topologically ordered"
        self.nodes = nodes
        self.output = output

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t._vjp is None and t.requires_grad]


def backward(output: Tensor, graph: Graph | None = None) -> dict[int, np.ndarray]:
    """Accumulate d(output)/d(leaf) into ``leaf.grad``; returns grads keyed by tensor id."""
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    graph = graph or Graph(output)
    grads: dict[int, np.ndarray] = {output._id: np.ones(output.shape, dtype=np.float64)}
    result = {}
    for node in reversed(graph.nodes):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g.astype(node.data.dtype) if node.grad is None else node.grad + g
            result[node._id] = node.grad
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg)
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
    return result


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3,
                               indices: Iterable[int] | None = None) -> np.ndarray:
    """Central differences of a scalar function, one flat coordinate at a time.

    ``indices`` restricts the probe to a subset of flat coordinates; others stay 0.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    base = f(x.copy())
    if f(x.copy()) != base:
        raise ValueError("f is not deterministic: repeated evaluation differs")
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + h
        fp = f(x.copy())
        flat[i] = old - h
        fm = f(x.copy())
        flat[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)
