"""Dense tensors with a reverse-mode tape.

Every op that touches a tensor requiring gradients appends one node to the
active :class:`Tape`.  Nodes only ever reference earlier nodes, so a single
reverse sweep over the node list is a valid topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from ..errors import NonScalarRoot, ShapeMismatch

_dtype = np.dtype(np.float32)
_grad_enabled = True


def get_dtype() -> np.dtype:
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (e.g. ``np.float64`` for gradchecks)."""
    global _dtype
    prev = _dtype
    _dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _dtype = prev


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("kind", "out", "parents", "backward_fn")

    def __init__(self, kind, out, parents, backward_fn):
        self.kind = kind
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Append-only op log.  ``backward`` consumes it and resets it."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, kind: str, out: "Tensor", parents: Sequence["Tensor"], backward_fn: Callable):
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(Node(kind, out, tuple(parents), backward_fn))

    def reset(self):
        for node in self.nodes:
            node.out.node_id = None
            node.out._tape = None
        self.nodes = []

    def backward(self, root: "Tensor", retain: bool = False) -> dict:
        if root.data.size != 1:
            raise NonScalarRoot(f"backward needs a scalar root, got shape {root.shape}")
        leaf_grads: dict = {}

        def to_leaf(t, g):
            t.grad = g.copy() if t.grad is None else t.grad + g
            leaf_grads[t] = t.grad

        if root.node_id is None or root._tape is not self:
            if root.requires_grad:
                to_leaf(root, np.ones_like(root.data))
            return leaf_grads

        pending = {root.node_id: np.ones_like(root.data)}
        for nid in range(root.node_id, -1, -1):
            g = pending.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            for p, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p.node_id is not None and p._tape is self:
                    prev = pending.get(p.node_id)
                    pending[p.node_id] = pg if prev is None else prev + pg
                else:
                    to_leaf(p, pg)
        if not retain:
            self.reset()
        return leaf_grads


_tapes = [Tape()]


def current_tape() -> Tape:
    return _tapes[-1]


@contextlib.contextmanager
def use_tape(tape: Tape | None = None):
    tape = Tape() if tape is None else tape
    _tapes.append(tape)
    try:
        yield tape
    finally:
        _tapes.pop()


def backward(root: "Tensor", retain: bool = False) -> dict:
    """Reverse sweep from a scalar ``root``; leaf gradients land in ``.grad`` and the returned map."""
    tape = root._tape if root._tape is not None else current_tape()
    return tape.backward(root, retain=retain)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self, retain: bool = False):
        return backward(self, retain=retain)

    # operators
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _dtype))


def make_result(kind: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output and record it when any parent needs gradients."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        current_tape().record(kind, out, parents, backward_fn)
    return out


# ----------------------------------------------------------------------------
# broadcasting: equal shapes, scalars, or a 1-D vector along axis 1


def _bcast_kind(shape, ref):
    if shape == ref:
        return "same"
    if len(shape) == 0 or (len(shape) == 1 and shape[0] == 1 and len(ref) != 1):
        return "scalar"
    if len(shape) == 1 and len(ref) >= 2 and shape[0] == ref[1]:
        return "channel"
    return None


def _expand(arr: np.ndarray, kind: str, ndim: int) -> np.ndarray:
    if kind == "channel":
        return arr.reshape((1, -1) + (1,) * (ndim - 2))
    return arr


def _reduce(g: np.ndarray, kind: str, shape) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "scalar":
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    axes = tuple(i for i in range(g.ndim) if i != 1)
    return g.sum(axis=axes)


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    ka = _bcast_kind(a.shape, b.shape)
    if ka == "same":
        return a, b, "same", "same", a.shape
    if ka is not None:
        return a, b, ka, "same", b.shape
    kb = _bcast_kind(b.shape, a.shape)
    if kb is None:
        raise ShapeMismatch(f"cannot combine shapes {a.shape} and {b.shape}")
    return a, b, "same", kb, a.shape


def add(a, b) -> Tensor:
    a, b, ka, kb, shape = _binary_operands(a, b)
    n = len(shape)
    data = _expand(a.data, ka, n) + _expand(b.data, kb, n)

    def bw(g):
        return _reduce(g, ka, a.shape), _reduce(g, kb, b.shape)

    return make_result("add", data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b, ka, kb, shape = _binary_operands(a, b)
    n = len(shape)
    data = _expand(a.data, ka, n) - _expand(b.data, kb, n)

    def bw(g):
        return _reduce(g, ka, a.shape), _reduce(-g, kb, b.shape)

    return make_result("sub", data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b, ka, kb, shape = _binary_operands(a, b)
    n = len(shape)
    ad, bd = _expand(a.data, ka, n), _expand(b.data, kb, n)
    data = ad * bd

    def bw(g):
        return _reduce(g * bd, ka, a.shape), _reduce(g * ad, kb, b.shape)

    return make_result("mul", data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b, ka, kb, shape = _binary_operands(a, b)
    n = len(shape)
    ad, bd = _expand(a.data, ka, n), _expand(b.data, kb, n)
    data = ad / bd

    def bw(g):
        return _reduce(g / bd, ka, a.shape), _reduce(-g * ad / (bd * bd), kb, b.shape)

    return make_result("div", data, (a, b), bw)


def neg(x: Tensor) -> Tensor:
    return make_result("neg", -x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_result("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result("log", np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    y = y.astype(x.dtype, copy=False)
    return make_result("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_result("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_result("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    pos = x.data > 0
    slope = np.where(pos, 1.0, alpha).astype(x.dtype)
    return make_result("leaky_relu", x.data * slope, (x,), lambda g: (g * slope,))


_UNARY = {"neg": neg, "exp": exp, "log": log, "sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, *inputs, alpha: float = 0.01) -> Tensor:
    """Dispatch an elementwise op by name."""
    if kind in _BINARY:
        return _BINARY[kind](*inputs)
    if kind in _UNARY:
        return _UNARY[kind](*inputs)
    if kind == "leaky_relu":
        return leaky_relu(inputs[0], alpha)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ----------------------------------------------------------------------------
# linear algebra, reductions, shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return make_result("matmul", ad @ bd, (a, b), bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result("sum", data, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def flip(x: Tensor, axes) -> Tensor:
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    return make_result("flip", np.flip(x.data, axes).copy(), (x,), lambda g: (np.flip(g, axes).copy(),))


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] += g
        return (full,)

    return make_result("getitem", np.array(x.data[idx]), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result("concat", data, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", y, (x,), bw)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", p, (x,), bw)
