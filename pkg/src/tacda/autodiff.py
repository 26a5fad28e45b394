"""A small tape-based reverse-mode autodiff over numpy arrays.

Only the primitives the adaptation pipeline needs are provided.  Operations
are recorded onto the innermost active :class:`GradTape` whenever one of their
inputs is tracked; outside a tape every operation is a plain numpy call.

    >>> w = parameter(np.array([1.0, -2.0]))
    >>> with GradTape() as tape:
    ...     loss = sum_(w * w)
    >>> tape.gradient(loss, [w])[0]
    array([ 2., -4.])
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from . import softdtw as _sdtw

_ACTIVE: list["GradTape"] = []


class Tensor:
    __slots__ = ("data", "tracked")

    def __init__(self, data, tracked: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.tracked = tracked

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.tracked})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def parameter(data) -> Tensor:
    """A leaf tensor whose gradient is wanted."""
    return Tensor(np.array(data, dtype=np.float64), tracked=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


class GradTape:
    """Ordered record of primitive operations, replayed backwards by :func:`backward`."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list:
        return backward(self, loss, sources)


def _emit(data, inputs: tuple, grad_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _ACTIVE and any(t.tracked for t in inputs):
        out.tracked = True
        _ACTIVE[-1].records.append((out, inputs, grad_fn))
    return out


def backward(tape: GradTape, loss: Tensor, sources: Optional[Sequence[Tensor]] = None):
    """Reverse-mode sweep over ``tape`` starting from the scalar ``loss``.

    Returns one gradient per entry of ``sources`` (zeros where a source is not
    reached), or the full ``{id(tensor): grad}`` map when ``sources`` is None.
    Gradients flowing into the same node from several consumers are summed.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    keep = {id(s) for s in sources} if sources is not None else set()
    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, grad_fn in reversed(tape.records):
        key = id(out)
        g = grads.get(key) if key in keep else grads.pop(key, None)
        if g is None:
            continue
        for t, gi in zip(inputs, grad_fn(g)):
            if gi is None or not t.tracked:
                continue
            k = id(t)
            grads[k] = grads[k] + gi if k in grads else gi
    if sources is None:
        return grads
    return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is a 2-D weight matrix and ``a`` has any leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if bd.ndim != 2 or ad.shape[-1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def grad_fn(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit(ad @ bd, (a, b), grad_fn)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = expit(a.data)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(a.data * mask, (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(a.data.sum(axis=axis), (a,), grad_fn)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) for p in parts)


def take(a, idx) -> Tensor:
    """Indexing/slicing.  Repeated fancy indices accumulate their gradients."""
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic(idx)

    def grad_fn(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _emit(a.data[idx], (a,), grad_fn)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    n = len(tensors)
    return _emit(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def soft_dtw_values(x, y, gamma: float) -> Tensor:
    """Per-row soft-DTW between stacks ``x`` and ``y`` of shape ``(B, M, L)``.

    Differentiable in ``x`` only; ``y`` is the fixed reference.
    """
    x = as_tensor(x)
    yd = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if not x.tracked or not _ACTIVE:
        return Tensor(_sdtw.soft_dtw_batch(x.data, yd, gamma))
    values, grads = _sdtw.soft_dtw_batch(x.data, yd, gamma, return_grad=True)
    return _emit(values, (x,), lambda g: (g[:, None, None] * grads,))
