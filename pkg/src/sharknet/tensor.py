"""Tensors with tape-based reverse-mode automatic differentiation.

Every differentiable op appends a node to a :class:`Graph`; ``backward``
walks the node list in reverse insertion order, which is a valid reverse
topological order because a node's inputs are always recorded before it.

Arrays are channels-last (``N x H x W x C``) and default to float32.  The
float64 mode (``with precision(np.float64)``) exists for gradient checks.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

_default_dtype = contextvars.ContextVar("sharknet_dtype", default=np.float32)
_grad_enabled = contextvars.ContextVar("sharknet_grad", default=True)
_active_graph = contextvars.ContextVar("sharknet_graph", default=None)


@contextlib.contextmanager
def precision(dtype):
    """Set the default float dtype for tensors created inside the block."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    token = _default_dtype.set(dtype)
    try:
        yield
    finally:
        _default_dtype.reset(token)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def default_dtype():
    return _default_dtype.get()


@dataclass
class Node:
    id: int
    inputs: tuple
    backward: Callable

    @property
    def input_ids(self) -> tuple:
        return tuple(t.node for t in self.inputs if t.node is not None)


class Graph:
    """Append-only record of the operations that produced a value."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    @contextlib.contextmanager
    def recording(self):
        """Route ops on leaf-only inputs into this graph."""
        token = _active_graph.set(self)
        try:
            yield self
        finally:
            _active_graph.reset(token)

    def record(self, inputs: Sequence["Tensor"], backward: Callable) -> int:
        nid = len(self.nodes)
        for t in inputs:
            if t.node is not None and t.graph is self and t.node >= nid:
                raise RuntimeError("graph order violated")
        self.nodes.append(Node(nid, tuple(inputs), backward))
        return nid

    def backward(self, loss: "Tensor", retain_graph: bool = False) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

        Unless ``retain_graph`` is set, node closures are dropped afterwards;
        they hold large intermediates and form reference cycles with the
        tensors they produced.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.graph is not self or loss.node is None:
            raise ValueError("loss was not produced by this graph")
        grads = {loss.node: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.node + 1]):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.backward is _released:
                _released(g)
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.data.shape)
                if t.node is not None and t.graph is self:
                    prev = grads.get(t.node)
                    grads[t.node] = gi if prev is None else prev + gi
                elif t.grad is None:
                    t.grad = gi.copy()
                else:
                    t.grad = t.grad + gi
        if not retain_graph:
            self.release()

    def release(self) -> None:
        for node in self.nodes:
            if node.backward is not _released:
                node.inputs = ()
                node.backward = _released


def _not_scalar(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def _released(g):
    raise RuntimeError("graph was released by an earlier backward pass; use retain_graph=True")


class Tensor:
    """An n-dimensional float array that can carry a gradient."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype.get())
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.graph: Optional[Graph] = None
        self.node: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        if self.graph is None:
            raise ValueError("tensor was not produced by a recorded operation")
        self.graph.backward(self, retain_graph)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def record(out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out`` as the result of an op on ``inputs``.

    ``backward`` maps the output gradient to one gradient (or ``None``) per
    input.  Nothing is recorded when no input requires a gradient or when
    gradients are disabled.
    """
    res = Tensor(out, dtype=out.dtype)
    if not _grad_enabled.get() or not any(t.requires_grad for t in inputs):
        return res
    graphs = {id(t.graph): t.graph for t in inputs if t.graph is not None}
    if len(graphs) > 1:
        raise RuntimeError("inputs belong to different graphs")
    if graphs:
        graph = next(iter(graphs.values()))
    else:
        graph = _active_graph.get()
        if graph is None:
            graph = Graph()
    res.requires_grad = True
    res.graph = graph
    res.node = graph.record(inputs, backward)
    return res


def backward(loss: Tensor, graph: Optional[Graph] = None, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph if graph is not None else loss.graph
    if graph is None:
        raise ValueError("loss was not produced by a recorded operation")
    graph.backward(loss, retain_graph)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise and reductions ----------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.dtype)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.dtype)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.dtype)
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis), dtype=x.dtype)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return record(out, (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """Collapse everything but the leading batch axis."""
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    return record(np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed after subtracting the row max."""
    s = _softmax(x.data)
    return record(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return record(out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; returns ``x`` itself when not training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return record(x.data * mask, (x,), lambda g: (g * mask,))


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.dtype)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return record(a.data @ b.data, (a, b),
                  lambda g: (g @ b.data.T if a.requires_grad else None,
                             a.data.T @ g if b.requires_grad else None))


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    return add(matmul(x, weights), bias)


# -- convolution and pooling -------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Unfold valid ``kh x kw`` windows into rows ordered (kh, kw, C)."""
    n, h, w, c = x.shape
    ho, wo = conv_output_size(h, kh, stride), conv_output_size(w, kw, stride)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """Valid cross-correlation of an NHWC batch with a ``kh x kw x C x F`` kernel."""
    if padding != "valid":
        raise ValueError(f"only 'valid' padding is supported, got {padding!r}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, h, w, c = x.shape
    kh, kw, kc, f = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if kh > h or kw > w:
        raise ShapeError(f"conv2d kernel {kernel.shape} larger than input {x.shape}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {f} filters")
    ho, wo = conv_output_size(h, kh, stride), conv_output_size(w, kw, stride)
    cols = im2col(x.data, kh, kw, stride)
    wmat = kernel.data.reshape(kh * kw * c, f)
    out = (cols @ wmat + bias.data).reshape(n, ho, wo, f)

    def bw(g):
        g2 = g.reshape(-1, f)
        dk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        db = g2.sum(axis=0) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, c)
            dx = np.zeros(x.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dx[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, :, i, j]
        return dx, dk, db

    return record(out, (x, kernel, bias), bw)


def maxpool2d(x: Tensor, pool: int = 2, stride: int = 2) -> Tensor:
    """Window max; the gradient goes to the first maximal element (row-major)."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-d input, got {x.shape}")
    if pool < 1 or stride < 1:
        raise ValueError("pool and stride must be positive")
    n, h, w, c = x.shape
    if pool > h or pool > w:
        raise ShapeError(f"pool {pool} larger than spatial extent {h}x{w}")
    ho, wo = conv_output_size(h, pool, stride), conv_output_size(w, pool, stride)
    win = sliding_window_view(x.data, (pool, pool), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    flat = win.reshape(n, ho, wo, c, pool * pool)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        dx = np.zeros(x.shape, dtype=x.dtype)
        for di in range(pool):
            for dj in range(pool):
                hit = idx == di * pool + dj
                dx[:, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride] += g * hit
        return (dx,)

    return record(np.ascontiguousarray(out), (x,), bw)
