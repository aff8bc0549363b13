"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Covers exactly the ops the model graphs and losses need: matmul, elementwise
arithmetic, tanh / softplus / exp / log / sqrt, the rowwise softmax family,
concat / narrow, reductions, L2 normalization, component selection, and a
straight-through helper. A forward op records itself on the active tape (if
any); creation order doubles as a valid topological order, so backward is a
single reversed sweep with gradient accumulation at fan-out. With no active
tape, ops run at plain numpy speed and record nothing, which is what
prediction uses.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError


class Tensor:
    """A numpy float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other))


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Record of forward ops, in creation order."""

    def __init__(self):
        self._records = []

    def record(self, out: Tensor, parents, vjp):
        self._records.append((out, parents, vjp))

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor) -> dict:
        """Run reverse accumulation from a scalar loss.

        Returns {leaf Tensor: gradient array} for every leaf reached by the
        sweep, and mirrors each gradient onto the leaf's .grad. Tensors not
        on any path from the loss simply do not appear.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        by_id = {id(loss): loss}
        produced = {id(out) for out, _, _ in self._records}
        for out, parents, vjp in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                pid = id(p)
                by_id[pid] = p
                have = grads.get(pid)
                grads[pid] = pg if have is None else have + pg
        leaves = {}
        for tid, g in grads.items():
            if tid in produced:
                continue
            t = by_id[tid]
            t.grad = g
            leaves[t] = g
        return leaves


_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


@contextmanager
def tape():
    """Activate a fresh tape for this thread; yields it."""
    prev = _active_tape()
    t = Tape()
    _state.tape = t
    try:
        yield t
    finally:
        _state.tape = prev


def _track(out: Tensor, parents, vjp) -> Tensor:
    t = _active_tape()
    if t is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    t.record(out, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---- arithmetic ----

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _track(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _track(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _track(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)

    def vjp(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _track(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _track(Tensor(-a.data), (a,), lambda g: (-g,))


def pow_const(a: Tensor, p: float) -> Tensor:
    out = Tensor(a.data ** p)
    return _track(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return _track(out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _track(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    return _track(out, (a,), lambda g: (g / (2.0 * out.data),))


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    return _track(out, (a,), lambda g: (g * (1.0 - out.data * out.data),))


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x), computed stably for large |x|
    out = Tensor(np.logaddexp(0.0, a.data))

    def vjp(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
        return (g * sig,)

    return _track(out, (a,), vjp)


def minimum_const(a: Tensor, cap: float) -> Tensor:
    """Elementwise min(a, cap); gradient passes where a <= cap."""
    out = Tensor(np.minimum(a.data, cap))
    return _track(out, (a,), lambda g: (g * (a.data <= cap),))


def maximum_const(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient passes where a >= floor."""
    out = Tensor(np.maximum(a.data, floor))
    return _track(out, (a,), lambda g: (g * (a.data >= floor),))


# ---- linear algebra / structure ----

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    return _track(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T.copy())
    return _track(out, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _track(out, (a,), lambda g: (g.reshape(a.data.shape),))


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_coerce(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _track(out, tuple(parts), vjp)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _track(out, (a,), vjp)


def diag(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise DimensionError(f"diag expects a square matrix, got {a.data.shape}")
    out = Tensor(np.diagonal(a.data).copy())

    def vjp(g):
        full = np.zeros_like(a.data)
        np.fill_diagonal(full, g)
        return (full,)

    return _track(out, (a,), vjp)


def take(a: Tensor, index: int) -> Tensor:
    if a.data.ndim != 1:
        raise DimensionError(f"take expects a vector, got {a.data.shape}")
    out = Tensor(a.data[index])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _track(out, (a,), vjp)


def take_per_row(a: Tensor, indices) -> Tensor:
    """Pick one column per row: out[i] = a[i, indices[i]]."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2 or idx.shape != (a.data.shape[0],):
        raise DimensionError(f"take_per_row: got {a.data.shape} with indices {idx.shape}")
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx].copy())

    def vjp(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return (full,)

    return _track(out, (a,), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _track(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---- fused rowwise softmax family (numerically stable) ----

def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    out = Tensor(lse if keepdims else np.squeeze(lse, axis=axis))

    def vjp(g):
        soft = np.exp(a.data - lse)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (soft * gg,)

    return _track(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _track(out, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    y = a.data - lse
    out = Tensor(y)

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _track(out, (a,), vjp)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Rows scaled to unit norm; smooth everywhere via a tiny additive eps."""
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    s = n + 1e-12
    y = a.data / s
    out = Tensor(y)

    def vjp(g):
        dot = (g * a.data).sum(axis=axis, keepdims=True)
        return (g / s - a.data * (dot / (s * s * np.maximum(n, 1e-300))),)

    return _track(out, (a,), vjp)


def select_components(flat: Tensor, onehot: Tensor, h: int, k: int) -> Tensor:
    """Pick one [h] slice per row from a [B, h*k] bank via a [B, k] one-hot.

    Row layout is h-major: element (j, c) of the bank sits at column j*k + c,
    matching a final linear layer that emits k stacked columns per feature.
    """
    b = flat.data.shape[0]
    if flat.data.shape != (b, h * k) or onehot.data.shape != (b, k):
        raise DimensionError(
            f"select_components: flat {flat.data.shape}, onehot {onehot.data.shape}, h={h}, k={k}")
    cube = flat.data.reshape(b, h, k)
    out = Tensor(np.einsum("bhk,bk->bh", cube, onehot.data))

    def vjp(g):
        gflat = np.einsum("bh,bk->bhk", g, onehot.data).reshape(b, h * k)
        gone = np.einsum("bh,bhk->bk", g, cube)
        return (gflat, gone)

    return _track(out, (flat, onehot), vjp)


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward emits `hard` exactly; backward passes gradients to `soft`."""
    if soft.data.shape != hard.shape:
        raise DimensionError(f"straight_through: {soft.data.shape} vs {hard.shape}")
    out = Tensor(np.asarray(hard, dtype=np.float64).copy())
    return _track(out, (soft,), lambda g: (g,))


def detach(a: Tensor) -> Tensor:
    """Constant view of a's value; blocks gradient flow."""
    return Tensor(a.data)
