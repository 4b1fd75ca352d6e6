"""Dense tensors with tape-based reverse-mode differentiation.

Operations only record onto a tape when one is active (``with Tape() as tape``)
and at least one input requires a gradient, so plain inference pays no
bookkeeping cost.
"""
from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "relu",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
    "square",
    "norm",
]


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class Tensor:
    """An n-dimensional real array that can take part in differentiation.

    ``data`` may be rebound (optimizers do this) but never to an array of a
    different shape.
    """

    __slots__ = ("_data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value):
        value = np.asarray(value)
        if value.shape != self._data.shape:
            raise ShapeError(
                f"cannot rebind tensor of shape {self._data.shape} to shape {value.shape}"
            )
        self._data = value

    @property
    def shape(self):
        return self._data.shape

    @property
    def ndim(self):
        return self._data.ndim

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def size(self):
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        return float(self._data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self._data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self._data)

    # arithmetic sugar
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

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.float64
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so every node's inputs were
    produced (or are leaves) before it runs; reverse iteration is therefore a
    valid topological order for the backward sweep.
    """

    _local = threading.local()

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        stack = self._stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        self._stack().pop()
        return False

    @classmethod
    def _stack(cls):
        stack = getattr(cls._local, "stack", None)
        if stack is None:
            stack = cls._local.stack = []
        return stack

    @classmethod
    def current(cls):
        stack = cls._stack()
        return stack[-1] if stack else None

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict:
        """Propagate d(loss)/d(.) to every leaf that requires a gradient.

        Gradients are accumulated into ``leaf.grad`` and also returned as a
        ``{leaf: grad}`` mapping.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        produced = set()
        leaves = {}
        for out, inputs, _ in self.nodes:
            produced.add(id(out))
            for t in inputs:
                if t.requires_grad:
                    leaves[id(t)] = t
        if loss.requires_grad and id(loss) not in produced:
            leaves[id(loss)] = loss
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = {}
        for key, leaf in leaves.items():
            if key in produced:
                continue
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            result[leaf] = g
        return result


def backward(tape: Tape, loss: Tensor) -> dict:
    return tape.backward(loss)


def _make(data, inputs, fn) -> Tensor:
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.nodes.append((out, inputs, fn))
        return out
    return Tensor(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        b = as_tensor(b, dtype=a.dtype) if not isinstance(b, Tensor) else b
    else:
        b = as_tensor(b)
        a = as_tensor(a, dtype=b.dtype)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def fn(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics (1-D operands and batch broadcasting)."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError("matmul operands must have at least one dimension")
    if ad.shape[-1] != bd.shape[0 if bd.ndim == 1 else -2]:
        raise ShapeError(
            f"matmul inner dimension mismatch: {ad.shape} @ {bd.shape}"
        )
    a2 = ad[None, :] if ad.ndim == 1 else ad
    b2 = bd[:, None] if bd.ndim == 1 else bd
    out2_shape = np.broadcast_shapes(a2.shape[:-2], b2.shape[:-2]) + (a2.shape[-2], b2.shape[-1])
    # a stacked operand against a plain matrix folds into one large GEMM
    flat = b2.ndim == 2 and a2.ndim > 2
    if flat:
        out = (a2.reshape(-1, a2.shape[-1]) @ b2).reshape(out2_shape)
        out = out.reshape(ad.shape[:-1] + bd.shape[1:]) if bd.ndim == 1 else out
    else:
        out = ad @ bd

    def fn(g):
        g2 = np.reshape(g, out2_shape)
        ga = gb = None
        if flat:
            gf = g2.reshape(-1, g2.shape[-1])
            if a.requires_grad:
                ga = (gf @ b2.T).reshape(ad.shape)
            if b.requires_grad:
                gb = (a2.reshape(-1, a2.shape[-1]).T @ gf).reshape(bd.shape)
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(bd.shape)
        return ga, gb

    return _make(out, (a, b), fn)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), fn)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([shape[ax] for ax in axes]))

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), fn)


def concat(tensors, axis=0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    # np.maximum propagates NaN, so a poisoned input still surfaces at the output
    return _make(np.maximum(a.data, 0.0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def norm(a, axis=-1, keepdims=False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the origin is taken as 0."""
    a = as_tensor(a)
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * ad / safe, 0.0),)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), fn)
