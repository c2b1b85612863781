"""Dense n-d tensors with a reverse-mode differentiation tape.

A ``Tensor`` wraps a row-major numpy buffer (float32 by default, float64 for
high-precision checks). Operations executed while a ``Tape`` is active record
one node each; ``Tape.backward`` replays the nodes in reverse, applying the
hand-written adjoint rule of every operation. Tensors are immutable once
created; a tape belongs to a single worker at a time.

Broadcasting follows the trailing-axis rule (align shapes from the right,
stretch extent-1 axes), matching numpy exactly.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32


class Tensor:
    """Immutable dense array value, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = np.ascontiguousarray(arr, dtype=DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)

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

    def item(self) -> float:
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the module-level functions do the real work
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


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_ACTIVE = threading.local()


def _active_tape():
    stack = getattr(_ACTIVE, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations for one forward pass.

    Nodes are appended in execution order, which is a topological order by
    construction. ``backward`` seeds the scalar loss with gradient 1 and
    accumulates adjoints into per-tensor buffers keyed by tensor identity.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_ACTIVE, "stack", None)
        if stack is None:
            stack = _ACTIVE.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.stack.pop()
        return False

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward: Callable[[np.ndarray], tuple]) -> None:
        self.nodes.append(_Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        """Reverse-topological accumulation of adjoints from a scalar loss."""
        if loss.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads = self._grads
        grads.clear()
        grads[id(loss)] = np.ones_like(loss.data)
        produced = {id(node.output) for node in self.nodes}
        for node in reversed(self.nodes):
            gout = grads.get(id(node.output))
            if gout is None:
                continue
            for tensor, g in zip(node.inputs, node.backward(gout)):
                if g is None:
                    continue
                if not (tensor.requires_grad or id(tensor) in produced):
                    continue
                acc = grads.get(id(tensor))
                grads[id(tensor)] = g if acc is None else acc + g
        # every requires_grad leaf that took part in the pass gets a buffer
        for node in self.nodes:
            for tensor in node.inputs:
                if tensor.requires_grad and id(tensor) not in grads:
                    grads[id(tensor)] = np.zeros_like(tensor.data)

    def grad(self, tensor: Tensor):
        return self._grads.get(id(tensor))


def _apply(op: str, inputs: tuple, out_data: np.ndarray, backward) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the un-broadcast operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # evaluated piecewise to stay finite for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """c = a @ b with a of shape (..., m, k) and b of shape (k, n).

    Adjoints: dA = dC b^T, dB = a^T dC (leading axes of a folded into rows).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(gout):
        ga = gout @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        g2 = gout.reshape(-1, gout.shape[-1])
        return ga, a2.T @ g2

    return _apply("matmul", (a, b), out, backward)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def backward(gout):
        return _unbroadcast(gout, a.shape), _unbroadcast(gout, b.shape)

    return _apply("add", (a, b), out, backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def backward(gout):
        return _unbroadcast(gout, a.shape), _unbroadcast(-gout, b.shape)

    return _apply("sub", (a, b), out, backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def backward(gout):
        return (_unbroadcast(gout * b.data, a.shape),
                _unbroadcast(gout * a.data, b.shape))

    return _apply("mul", (a, b), out, backward)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _apply("neg", (x,), -x.data, lambda gout: (-gout,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _apply("exp", (x,), out, lambda gout: (gout * out,))


def softplus(x) -> Tensor:
    """log(1 + e^x), evaluated as logaddexp for stability; d/dx = sigmoid(x)."""
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return _apply("softplus", (x,), out, lambda gout: (gout * _sigmoid(x.data),))


def silu(x) -> Tensor:
    """Swish activation x * sigmoid(x); d/dx = s(x) (1 + x (1 - s(x)))."""
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s
    return _apply("silu", (x,), out, lambda gout: (gout * (s * (1.0 + x.data * (1.0 - s))),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return _apply("relu", (x,), out, lambda gout: (gout * (x.data > 0),))


def absolute(x) -> Tensor:
    """|x| with subgradient 0 at x == 0."""
    x = as_tensor(x)
    return _apply("abs", (x,), np.abs(x.data), lambda gout: (gout * np.sign(x.data),))


def huber(x, delta: float) -> Tensor:
    """Elementwise Huber penalty: x^2/2 inside |x| <= delta, linear outside."""
    x = as_tensor(x)
    ax = np.abs(x.data)
    out = np.where(ax <= delta, 0.5 * x.data * x.data, delta * (ax - 0.5 * delta))

    def backward(gout):
        return (gout * np.clip(x.data, -delta, delta),)

    return _apply("huber", (x,), out, backward)


# ---------------------------------------------------------------------------
# normalization and dropout


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis with learnable scale/shift.

    Uses the population variance (divide by the feature extent). The adjoint
    removes the mean and the x-hat component of the incoming gradient:
        dx = inv * (g - mean(g) - xhat * mean(g * xhat)),  g = gout * gamma
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: feature extent {d} does not match gamma {gamma.shape} / beta {beta.shape}")
    if eps < 0:
        raise ValueError(f"layer_norm: eps must be >= 0, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(gout):
        g = gout * gamma.data
        gx = inv * (g - g.mean(axis=-1, keepdims=True)
                    - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(gout.ndim - 1))
        return gx, (gout * xhat).sum(axis=lead), gout.sum(axis=lead)

    return _apply("layer_norm", (x, gamma, beta), out, backward)


def dropout(x, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout: scales kept entries by 1/(1-p) so eval is identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not train or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _apply("dropout", (x,), x.data * mask, lambda gout: (gout * mask,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _apply("reshape", (x,), out, lambda gout: (gout.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _apply("transpose", (x,), out, lambda gout: (np.transpose(gout, inverse),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return _apply("broadcast_to", (x,), out, lambda gout: (_unbroadcast(gout, x.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(gout):
        return tuple(np.split(gout, splits, axis=axis))

    return _apply("concat", tensors, out, backward)


def take_index(x, k: int, axis: int) -> Tensor:
    """Select index ``k`` along ``axis`` (rank drops by one)."""
    x = as_tensor(x)
    out = np.take(x.data, k, axis=axis)

    def backward(gout):
        g = np.zeros_like(x.data)
        np.copyto(np.moveaxis(g, axis, 0)[k], gout)
        return (g,)

    return _apply("take_index", (x,), out, backward)


def embedding_lookup(table, indices) -> Tensor:
    """Row gather ``table[indices]``; adjoint scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"lookup index out of range [0, {table.shape[0]}) along the table row axis")
    out = table.data[idx]

    def backward(gout):
        g = np.zeros_like(table.data)
        np.add.at(g, idx, gout)
        return (g,)

    return _apply("lookup", (table,), out, backward)


# ---------------------------------------------------------------------------
# reductions


def tsum(x) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum())
    return _apply("sum", (x,), out, lambda gout: (np.broadcast_to(gout, x.shape).copy(),))


def tmean(x) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.mean())
    n = x.size

    def backward(gout):
        return (np.broadcast_to(gout / n, x.shape).copy(),)

    return _apply("mean", (x,), out, backward)


def sum_axis(x, axis: int, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(gout):
        g = gout if keepdims else np.expand_dims(gout, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _apply("sum_axis", (x,), out, backward)
