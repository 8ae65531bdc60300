"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed while a :class:`Graph` is active append one node per
output to that graph's tape. :meth:`Graph.backward` walks the tape in strict
reverse append order. Outside a graph, operations only compute values.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "Node",
    "ShapeError",
    "DomainError",
    "GraphStateError",
    "NonFiniteError",
    "elementwise",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "sigmoid",
    "log",
    "clamp",
    "matmul",
    "softmax_axis",
    "layer_norm",
    "conv2d",
    "max_pool2d",
    "reduce",
    "reshape",
    "record",
    "backward",
    "as_tensor",
    "no_graph",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation."""


class DomainError(ValueError):
    """An operand value lies outside the operation's domain."""


class GraphStateError(RuntimeError):
    """The graph is not in a state that permits the requested action."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_ids = itertools.count()
_local = threading.local()


def _active_graph() -> Optional["Graph"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "id", "graph", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.id = next(_ids)
        self.graph: Optional[Graph] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple
    output_id: int
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    ctx: dict = field(default_factory=dict)


class Graph:
    """Append-only tape of operations.

    Use as a context manager; tensors produced inside the ``with`` block by
    inputs that require gradients are recorded here.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._producers: dict[int, int] = {}
        self._done = False

    def __enter__(self) -> "Graph":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def append(self, node: Node) -> None:
        if self._done:
            raise GraphStateError("graph already consumed by backward; call reset()")
        if node.output_id in self._producers:
            raise GraphStateError(f"tensor {node.output_id} already has a producer")
        self._producers[node.output_id] = len(self.nodes)
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()
        self._producers.clear()
        self._done = False

    def backward(self, loss: Tensor) -> None:
        if self._done:
            raise GraphStateError("backward already called on this graph; call reset()")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.graph is not self and loss.id not in self._producers:
            raise GraphStateError("loss was not produced on this graph")
        self._done = True

        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            for t in node.inputs:
                if t.requires_grad and t.id not in self._producers:
                    leaves[t.id] = t
            g_out = grads.pop(node.output_id, None)
            if g_out is None:
                continue
            for t, g in zip(node.inputs, node.backward_fn(g_out)):
                if g is None or not t.requires_grad:
                    continue
                prev = grads.get(t.id)
                grads[t.id] = g if prev is None else prev + g
        if loss.id not in self._producers and loss.requires_grad:
            leaves[loss.id] = loss
        for tid, leaf in leaves.items():
            g = grads.get(tid)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


class no_graph:
    """Suspend recording, e.g. for evaluation or finite differences."""

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        self._saved = list(stack)
        stack.clear()
        return self

    def __exit__(self, *exc):
        _local.stack[:] = self._saved


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf of ``loss``'s graph."""
    graph = loss.graph
    if graph is None:
        raise GraphStateError("loss is not attached to a graph")
    graph.backward(loss)


def record(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
           **ctx) -> Tensor:
    """Wrap ``out_data`` in a Tensor and register its gradient rule.

    ``backward_fn`` maps the upstream gradient to one gradient (or None) per
    input. Other modules use this to define custom differentiable ops.
    """
    out = Tensor(out_data)
    graph = _active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.graph = graph
        graph.append(Node(kind, tuple(inputs), out.id, backward_fn, ctx))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible") from None


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", (a, b), ad * bd, bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", (a,), -a.data, lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return record("relu", (a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise DomainError("log of non-positive value")
    d = a.data
    return record("log", (a,), np.log(d), lambda g: (g / d,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Confine values to ``[lo, hi]``; gradient is zero outside the interval."""
    a = as_tensor(a)
    if lo > hi:
        raise DomainError(f"empty clamp interval [{lo}, {hi}]")
    inside = (a.data >= lo) & (a.data <= hi)
    return record("clamp", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,),
                  lo=lo, hi=hi)


_UNARY = {"neg": neg, "relu": relu, "sigmoid": sigmoid, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a, b=None, *, lo: float = 1e-10, hi: float = 1 - 1e-10) -> Tensor:
    """Dispatch by name to one of the elementwise ops."""
    if op_kind in _BINARY:
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind == "clamp":
        return clamp(a, lo, hi)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return record("matmul", (a, b), ad @ bd, bw)


def softmax_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), s, bw, axis=axis)


def layer_norm(x, normalized_extent: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean, unit variance along one axis (no affine)."""
    x = as_tensor(x)
    ax = normalized_extent
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=ax, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=ax, keepdims=True)
        gx = (g * xhat).mean(axis=ax, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return record("layer_norm", (x,), xhat, bw, axis=ax, eps=eps)


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, k, k) view
    v = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def conv2d(x, w, stride: int = 1, pad: Optional[int] = None) -> Tensor:
    """2-D cross-correlation of N×C×H×W input with O×C×k×k weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d needs rank-4 input and weights")
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c:
        raise ShapeError(f"weights expect {ci} input channels, input has {c}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {k}×{k2}")
    if pad is None:
        pad = (k - 1) // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _windows(xp, k, stride).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    xshape = xp.shape

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gc = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros(xshape)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        gc[:, :, :, :, i, j].transpose(0, 3, 1, 2))
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw

    return record("conv2d", (x, w), np.ascontiguousarray(out), bw, stride=stride, pad=pad)


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route gradient to the first position."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"spatial size {h}×{w} not divisible by pool size {size}")
    ho, wo = h // size, w // size
    blocks = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((n, c, ho, wo, size * size))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return record("max_pool2d", (x,), out, bw, size=size)


def reduce(x, axes: Iterable[int], kind: str = "sum", keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axes``.

    Max routes gradient to the first arg-max (lowest linear index within the
    reduced block).
    """
    x = as_tensor(x)
    axes = tuple(sorted(a % x.ndim for a in axes)) if x.ndim else ()
    if len(set(axes)) != len(axes):
        raise ShapeError(f"repeated reduction axes {axes}")
    if kind not in ("sum", "mean", "max"):
        raise ValueError(f"unknown reduction {kind!r}")
    if not axes:
        return record("reduce_identity", (x,), x.data.copy(), lambda g: (g,))
    if any(x.shape[a] == 0 for a in axes):
        raise ShapeError("empty reduction extent")
    shape = x.shape
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(shape))
    out_shape = kept_shape if keepdims else tuple(s for i, s in enumerate(shape) if i not in axes)

    if kind == "sum":
        out = x.data.sum(axis=axes)
        return record("reduce_sum", (x,), out.reshape(out_shape),
                      lambda g: (np.broadcast_to(g.reshape(kept_shape), shape).copy(),))
    if kind == "mean":
        count = int(np.prod([shape[a] for a in axes]))
        out = x.data.mean(axis=axes)
        return record("reduce_mean", (x,), out.reshape(out_shape),
                      lambda g: (np.broadcast_to(g.reshape(kept_shape) / count, shape).copy(),))

    rest = tuple(i for i in range(x.ndim) if i not in axes)
    perm = rest + axes
    moved = x.data.transpose(perm)
    flat = moved.reshape(moved.shape[:len(rest)] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], g.reshape(arg.shape)[..., None], axis=-1)
        return (gf.reshape(moved.shape).transpose(np.argsort(perm)),)

    return record("reduce_max", (x,), out.reshape(out_shape), bw)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return record("reshape", (x,), out, lambda g: (g.reshape(src),))
