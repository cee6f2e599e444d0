"""Reverse-mode automatic differentiation on top of numpy.

A :class:`Tensor` wraps an ndarray and, when it was produced by a
differentiable primitive, remembers its parents and a closure mapping the
output gradient to parent gradients.  Graphs are rebuilt on every forward
pass and released by :meth:`Tensor.backward`.

Recurrent layers are provided as fused primitives (:func:`lstm_cell`,
:func:`lstm_layer`) with hand-written backward passes; everything else is
composed from small elementwise and linear-algebra primitives.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "tanh",
    "sigmoid",
    "relu",
    "leaky_relu",
    "softmax",
    "log_softmax",
    "log",
    "exp",
    "clip",
    "concat",
    "stack",
    "getitem",
    "reshape",
    "transpose",
    "embedding_lookup",
    "conv1d",
    "max_pool1d",
    "sum",
    "mean",
    "lstm_cell",
    "lstm_layer",
]

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " and ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (non-scalar loss, reused graph)."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class no_grad:
    """Context manager that disables graph recording on the current thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _state.enabled = False
        return self

    def __exit__(self, *exc):
        _state.enabled = self._prev
        return False


class Tensor:
    """n-dimensional array that participates in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_consumed")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "biu":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self._consumed = False

    # -- array-like surface --------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------------
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

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

    # -- backward ------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable tensor.

        Leaf gradients accumulate across calls (until cleared); the graph
        behind ``self`` is released afterwards, so a second call on the same
        loss raises :class:`GraphError`.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward() called twice on the same graph")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


def _topological_order(root: Tensor) -> list:
    order = []
    seen = set()
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


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE)
                                                  if np.isscalar(x) else x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._consumed = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # clipping keeps exp finite; the logistic is saturated far before 700
    return 1.0 / (1.0 + np.exp(-np.clip(x, -700.0, 700.0)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    m = a.data > 0
    return _make(a.data * m, (a,), lambda g: (g * m,), "relu")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """numpy ``@`` semantics, including batched and broadcast leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = gb = None
        if b.ndim == 1:
            if a.requires_grad:
                ga = g[..., None] * bd
            if b.requires_grad:
                gb = (ad * g[..., None]).reshape(-1, bd.shape[0]).sum(axis=0)
            return ga, gb
        if a.ndim == 1:
            if a.requires_grad:
                ga = _unbroadcast(g[..., None, :] @ np.swapaxes(bd, -1, -2), (1,) + ad.shape)
                ga = ga.reshape(ad.shape)
            if b.requires_grad:
                gb = _unbroadcast(ad[:, None] * g[..., None, :], bd.shape)
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # (..., n, k) @ (k, m): fold leading dims into one gemm
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", detail="no operands")
    nd = ts[0].ndim
    ax = axis % nd if nd else 0
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", ts[0].shape, t.shape, detail=f"axis={axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, ts, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError("stack", ts[0].shape, t.shape)
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, ts, backward, "stack")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError("slice", a.shape, detail=str(exc)) from None
    basic = _is_basic_index(idx)
    shape, dtype = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), backward, "slice")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", orig, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def embedding_lookup(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids.data if isinstance(ids, Tensor) else ids).astype(np.intp)
    if table.ndim != 2:
        raise ShapeError("embedding_lookup", table.shape, ids.shape, detail="table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding_lookup", table.shape, ids.shape,
                         detail=f"id out of range [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), backward, "embedding_lookup")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    out = a.data.sum(axis=axes, keepdims=keepdims) / n
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "mean")


# ---------------------------------------------------------------------------
# convolution and pooling over time, layout (batch, time, channels)
# ---------------------------------------------------------------------------

def conv1d(x, weight, bias=None) -> Tensor:
    """'same'-padded 1-D convolution.

    ``x`` is ``(B, S, Cin)``, ``weight`` is ``(K, Cin, Cout)``.  Even kernel
    widths pad one more frame on the right than on the left.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise ShapeError("conv1d", x.shape, weight.shape)
    k = weight.shape[0]
    left, right = (k - 1) // 2, k // 2
    B, S, C = x.shape
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    cols = np.stack([xp[:, j:j + S, :] for j in range(k)], axis=2).reshape(B, S, k * C)
    wmat = weight.data.reshape(k * C, -1)
    out = cols @ wmat
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[2],):
            raise ShapeError("conv1d", weight.shape, bias.shape, detail="bias")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gcols = (g @ wmat.T).reshape(B, S, k, C)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + S, :] += gcols[:, :, j, :]
            gx = gxp[:, left:left + S, :]
        if weight.requires_grad:
            gw = (cols.reshape(-1, k * C).T @ g.reshape(-1, g.shape[-1])).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward, "conv1d")


def max_pool1d(x) -> Tensor:
    """Width-2, stride-1 max pooling over time with zero padding on the right."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError("max_pool1d", x.shape, detail="expected (B, S, C)")
    nxt = np.concatenate([x.data[:, 1:, :], np.zeros_like(x.data[:, :1, :])], axis=1)
    take_self = x.data >= nxt
    out = np.where(take_self, x.data, nxt)

    def backward(g):
        gx = g * take_self
        gx[:, 1:, :] += (g * ~take_self)[:, :-1, :]
        return (gx,)

    return _make(out, (x,), backward, "max_pool1d")


# ---------------------------------------------------------------------------
# fused recurrent primitives (gate order: input, forget, cell, output)
# ---------------------------------------------------------------------------

def lstm_cell(x, h, c, w_in, w_rec, b) -> Tensor:
    """One LSTM step; returns ``[h_new, c_new]`` concatenated on the last axis."""
    x, h, c, w_in, w_rec, b = (as_tensor(t) for t in (x, h, c, w_in, w_rec, b))
    H = h.shape[-1]
    if (w_in.shape != (x.shape[-1], 4 * H) or w_rec.shape != (H, 4 * H)
            or b.shape != (4 * H,) or c.shape != h.shape):
        raise ShapeError("lstm_cell", x.shape, h.shape, w_in.shape, w_rec.shape)
    z = x.data @ w_in.data + h.data @ w_rec.data + b.data
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    gg = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid(z[:, 3 * H:])
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc

    def backward(g):
        dh, dc = g[:, :H], g[:, H:]
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([dc * gg * i * (1.0 - i),
                             dc * c.data * f * (1.0 - f),
                             dc * i * (1.0 - gg * gg),
                             dh * tc * o * (1.0 - o)], axis=1)
        return (dz @ w_in.data.T, dz @ w_rec.data.T, dc * f,
                x.data.T @ dz, h.data.T @ dz, dz.sum(axis=0))

    return _make(np.concatenate([h_new, c_new], axis=1), (x, h, c, w_in, w_rec, b),
                 backward, "lstm_cell")


def lstm_layer(x, w_in, w_rec, b, mask=None, reverse: bool = False) -> Tensor:
    """Run an LSTM over ``x`` of shape ``(B, S, D)``; returns ``(B, S, H)``.

    ``mask`` is a ``(B, S)`` 0/1 array.  Masked frames leave the recurrent
    state untouched and emit zeros, so padded batches reproduce the
    per-sequence result, including for ``reverse=True``.
    """
    x, w_in, w_rec, b = (as_tensor(t) for t in (x, w_in, w_rec, b))
    if x.ndim != 3:
        raise ShapeError("lstm_layer", x.shape, detail="expected (B, S, D)")
    B, S, D = x.shape
    H = w_rec.shape[0]
    if w_in.shape != (D, 4 * H) or w_rec.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError("lstm_layer", x.shape, w_in.shape, w_rec.shape)
    dt = np.result_type(x.data, w_in.data)
    m = np.ones((B, S), dtype=dt) if mask is None else np.asarray(mask, dtype=dt)
    if m.shape != (B, S):
        raise ShapeError("lstm_layer", x.shape, m.shape, detail="mask")
    zx = x.data @ w_in.data + b.data
    W_r = w_rec.data
    steps = range(S - 1, -1, -1) if reverse else range(S)
    h = np.zeros((B, H), dtype=dt)
    c = np.zeros((B, H), dtype=dt)
    out = np.zeros((B, S, H), dtype=dt)
    hprev = np.empty((S, B, H), dtype=dt)
    cprev = np.empty((S, B, H), dtype=dt)
    gates = np.empty((S, B, 4 * H), dtype=dt)
    tcs = np.empty((S, B, H), dtype=dt)
    for t in steps:
        hprev[t], cprev[t] = h, c
        z = zx[:, t] + h @ W_r
        a = np.empty_like(z)
        a[:, :2 * H] = _sigmoid(z[:, :2 * H])
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        a[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
        gates[t] = a
        c_new = a[:, H:2 * H] * c + a[:, :H] * a[:, 2 * H:3 * H]
        tc = np.tanh(c_new)
        tcs[t] = tc
        h_new = a[:, 3 * H:] * tc
        mt = m[:, t, None]
        out[:, t] = mt * h_new
        c = c + mt * (c_new - c)
        h = h + mt * (h_new - h)

    def backward(g):
        dz_all = np.zeros((B, S, 4 * H), dtype=dt)
        dh = np.zeros((B, H), dtype=dt)
        dc = np.zeros((B, H), dtype=dt)
        back = range(S) if reverse else range(S - 1, -1, -1)
        for t in back:
            mt = m[:, t, None]
            a = gates[t]
            i, f, gg, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            tc = tcs[t]
            dh_new = mt * (dh + g[:, t])
            dc_new = mt * dc + dh_new * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :H] = dc_new * gg * i * (1.0 - i)
            dz[:, H:2 * H] = dc_new * cprev[t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc_new * i * (1.0 - gg * gg)
            dz[:, 3 * H:] = dh_new * tc * o * (1.0 - o)
            keep = 1.0 - mt
            dh = dz @ W_r.T + keep * dh
            dc = dc_new * f + keep * dc
        flat = dz_all.reshape(-1, 4 * H)
        gx = (flat @ w_in.data.T).reshape(B, S, D) if x.requires_grad else None
        gw_in = x.data.reshape(-1, D).T @ flat
        gw_rec = hprev.reshape(-1, H).T @ np.transpose(dz_all, (1, 0, 2)).reshape(-1, 4 * H)
        return gx, gw_in, gw_rec, flat.sum(axis=0)

    return _make(out, (x, w_in, w_rec, b), backward, "lstm_layer")
