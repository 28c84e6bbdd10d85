"""Dense float64 tensors with reverse-mode differentiation on a recorded tape.

Values are numpy arrays; the graph is a Wengert list. Nodes are appended to
the active tape in creation order, so parents always precede children and the
backward sweep is a single reverse pass over the list. With no tape active,
the same operations run as plain value computations and record nothing.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericsError, ShapeError

_ACTIVE_TAPE = None


class Tape:
    """Ordered record of one forward computation.

    ``nodes`` holds non-leaf tensors in the order they were created; that
    order is topological by construction.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate it."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "vjp", "op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.vjp = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut off from the graph."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    # Arithmetic builds graph nodes; see module-level ops below.
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, op: str, parents, vjp) -> Tensor:
    """Attach graph metadata to ``out`` if a tape is recording."""
    if _ACTIVE_TAPE is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.vjp = vjp
        out.op = op
        _ACTIVE_TAPE.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along axes that numpy broadcast up."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Primitives.


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record(out, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _record(out, "div", (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul needs (m,k) @ (k,n); got {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, "matmul", (a, b), vjp)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.exp(x.data))

    def vjp(g):
        return (g * out.data,)

    return _record(out, "exp", (x,), vjp)


def log(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.log(x.data))

    def vjp(g):
        return (g / x.data,)

    return _record(out, "log", (x,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch on sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(_sigmoid(np.atleast_1d(x.data)).reshape(x.data.shape))

    def vjp(g):
        return (g * out.data * (1.0 - out.data),)

    return _record(out, "sigmoid", (x,), vjp)


def softplus(x) -> Tensor:
    """log(1 + exp(x)), safe for large |x|."""
    x = as_tensor(x)
    out = Tensor(np.logaddexp(0.0, x.data))

    def vjp(g):
        return (g * _sigmoid(np.atleast_1d(x.data)).reshape(x.data.shape),)

    return _record(out, "softplus", (x,), vjp)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.where(x.data > 0, x.data, slope * x.data))

    def vjp(g):
        return (g * np.where(x.data > 0, 1.0, slope),)

    return _record(out, "leaky_relu", (x,), vjp)


def relu(x) -> Tensor:
    return leaky_relu(x, 0.0)


def absval(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.abs(x.data))

    def vjp(g):
        return (g * np.sign(x.data),)

    return _record(out, "abs", (x,), vjp)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where no clamping happened."""
    x = as_tensor(x)
    out = Tensor(np.clip(x.data, lo, hi))

    def vjp(g):
        return (g * ((x.data >= lo) & (x.data <= hi)),)

    return _record(out, "clip", (x,), vjp)


def clamp_min(x, lo: float) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, lo))

    def vjp(g):
        return (g * (x.data >= lo),)

    return _record(out, "clamp_min", (x,), vjp)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.data.shape).copy(),)

    return _record(out, "sum", (x,), vjp)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        count = x.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        count = x.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, x.data.shape).copy(),)

    return _record(out, "mean", (x,), vjp)


def l1_norm(x) -> Tensor:
    """Sum of absolute values over the whole tensor."""
    return tsum(absval(x))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _record(out, "reshape", (x,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _record(out, "concat", tensors, vjp)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    x = as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(x.data[idx])

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _record(out, "narrow", (x,), vjp)


# ---------------------------------------------------------------------------
# Backward pass.


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Intermediate gradients are rebuilt from scratch on every call; leaf
    gradients accumulate, so callers zero their parameters between steps.
    """
    if loss.data.ndim != 0:
        raise ContractError(
            f"backward needs a scalar loss; got shape {loss.data.shape}"
        )
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones(())
    for node in reversed(tape.nodes):
        if node.grad is None or node.vjp is None:
            continue
        parent_grads = node.vjp(node.grad)
        for p, pg in zip(node.parents, parent_grads):
            if not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = np.array(pg, dtype=np.float64)
            else:
                p.grad = p.grad + pg


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
