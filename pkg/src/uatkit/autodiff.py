"""Dense tensor arithmetic with reverse-mode automatic differentiation.

Just enough operator coverage for a small transformer encoder: matmul,
softmax, layer normalization, GELU, embedding lookup and cross-entropy,
all backed by numpy arrays. Storage is float32 by default; pass float64
arrays to run the whole graph in double precision (used by the
gradient-check suites).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy-backed tensor participating in a reverse-mode graph.

    Data is immutable by convention after construction; only ``grad`` is
    written to, by ``backward``. A graph is single-owner: do not share
    live graphs across threads.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        elif dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- backward pass ---------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from here.

        The loss must be scalar. Traversal is reverse topological order,
        visiting each node exactly once.
        """
        if self.data.shape != ():
            raise ShapeError(
                f"backward: loss must be a scalar, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# -- graph plumbing -------------------------------------------------------


def _make_node(op: str, out_data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._op = op
    record = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = record
    out._parents = tuple(parents) if record else ()
    out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ops -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    out = _make_node("add", out_data, (a, b))
    if out.requires_grad:

        def bw(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(g, b.shape))

        out._backward = bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    out = _make_node("sub", out_data, (a, b))
    if out.requires_grad:

        def bw(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(-g, b.shape))

        out._backward = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    out = _make_node("mul", out_data, (a, b))
    if out.requires_grad:

        def bw(g):
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

        out._backward = bw
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _make_node("scale", a.data * a.data.dtype.type(c), (a,))
    if out.requires_grad:

        def bw(g):
            _accumulate(a, g * a.data.dtype.type(c))

        out._backward = bw
    return out


# -- shape ops -------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    out = _make_node("reshape", out_data, (a,))
    if out.requires_grad:

        def bw(g):
            _accumulate(a, g.reshape(a.shape))

        out._backward = bw
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = _make_node("transpose", np.transpose(a.data, axes), (a,))
    if out.requires_grad:
        inv = np.argsort(axes)

        def bw(g):
            _accumulate(a, np.transpose(g, inv))

        out._backward = bw
    return out


# -- contractions -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.shape} @ {b.shape}"
        )
    out = _make_node("matmul", a.data @ b.data, (a, b))
    if out.requires_grad:

        def bw(g):
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

        out._backward = bw
    return out


# -- lookups ----------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ids is a constant integer array."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: id out of range for table with {table.shape[0]} rows"
        )
    out = _make_node("embedding", table.data[ids], (table,))
    if out.requires_grad:

        def bw(g):
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.ravel(), g.reshape(-1, table.shape[1]))

        out._backward = bw
    return out


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor: out[i] = a[idx[i]]."""
    idx = np.asarray(idx)
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows: input must be 2-d, got {a.shape}")
    out = _make_node("take_rows", a.data[idx], (a,))
    if out.requires_grad:

        def bw(g):
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

        out._backward = bw
    return out


def pick(a: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row element pick of a 2-d tensor: out[i] = a[i, idx[i]]."""
    idx = np.asarray(idx)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: need (R,V) tensor and (R,) indices, got {a.shape} / {idx.shape}")
    rows = np.arange(a.shape[0])
    out = _make_node("pick", a.data[rows, idx], (a,))
    if out.requires_grad:

        def bw(g):
            full = np.zeros_like(a.data)
            full[rows, idx] = g
            _accumulate(a, full)

        out._backward = bw
    return out


# -- nonlinearities ----------------------------------------------------------


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(_GELU_A)
    u = c * (x + k * x * x * x)
    t = np.tanh(u)
    out = _make_node("gelu", 0.5 * x * (1.0 + t), (a,))
    if out.requires_grad:

        def bw(g):
            du = c * (1.0 + 3.0 * k * x * x)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            _accumulate(a, g * local.astype(x.dtype))

        out._backward = bw
    return out


def softmax(a: Tensor) -> Tensor:
    """Numerically stable softmax along the last axis."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _make_node("softmax", y, (a,))
    if out.requires_grad:

        def bw(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accumulate(a, y * (g - dot))

        out._backward = bw
    return out


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = a.data
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layernorm: affine params must have shape ({x.shape[-1]},), "
            f"got gamma {gamma.shape}, beta {beta.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x - mu) * inv
    out = _make_node("layernorm", xhat * gamma.data + beta.data, (a, gamma, beta))
    if out.requires_grad:

        def bw(g):
            n = x.shape[-1]
            ghat = g * gamma.data
            m1 = ghat.mean(axis=-1, keepdims=True)
            m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(a, ((ghat - m1 - xhat * m2) * inv).astype(x.dtype))
            axes = tuple(range(x.ndim - 1))
            _accumulate(gamma, (g * xhat).sum(axis=axes))
            _accumulate(beta, g.sum(axis=axes))
            del n

        out._backward = bw
    return out


# -- losses ------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over rows via log-sum-exp.

    logits: (R, V) tensor, targets: (R,) integer array.
    """
    targets = np.asarray(targets)
    x = logits.data
    if x.ndim != 2 or targets.shape != (x.shape[0],):
        raise ShapeError(
            f"cross_entropy: need (R,V) logits and (R,) targets, got {logits.shape} / {targets.shape}"
        )
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(z)).squeeze(-1)
    rows = np.arange(x.shape[0])
    ce = lse - x[rows, targets]
    out = _make_node("cross_entropy", np.asarray(ce.mean(), dtype=x.dtype), (logits,))
    if out.requires_grad:
        probs = e / z

        def bw(g):
            d = probs.copy()
            d[rows, targets] -= 1.0
            _accumulate(logits, d * (g / x.dtype.type(x.shape[0])))

        out._backward = bw
    return out


def mean(a: Tensor) -> Tensor:
    """Mean over all elements, returning a scalar tensor."""
    out = _make_node("mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,))
    if out.requires_grad:

        def bw(g):
            _accumulate(a, np.full_like(a.data, g / a.data.size))

        out._backward = bw
    return out


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    """Plain-numpy log-softmax along the last axis (inference helper)."""
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
