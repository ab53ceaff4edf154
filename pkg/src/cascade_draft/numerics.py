"""Dense tensors on top of numpy with tape-based reverse-mode differentiation.

Only the handful of primitives needed by the transformer blocks, the cascade
drafter and its losses are provided. Operations preserve the dtype of their
inputs (float32 by default); gradient checks run the same graph in float64.

Recording happens only inside an active :class:`GradTape` and only for ops
with at least one ``requires_grad`` input, so inference pays no graph cost.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
LOG_CLAMP = 1e-12
_MASK_FILL = -1e30


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A dense array with optional gradient participation."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: GradTape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and not isinstance(x, np.ndarray):
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x), dtype=dtype)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

_TAPE_STACK: list[GradTape] = []


class GradTape:
    """Ordered record of primitive ops executed while the tape is active.

    Use as a context manager; :func:`backward` replays the records in
    reverse. A tape can be replayed once, after which a fresh tape is needed.
    """

    def __init__(self):
        self.records: list[tuple[str, tuple[Tensor, ...], Tensor, Callable]] = []
        self.consumed = False

    def __enter__(self) -> GradTape:
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, name: str, inputs: tuple[Tensor, ...], output: Tensor, fn: Callable) -> None:
        output._tape = self
        self.records.append((name, inputs, output, fn))

    def backward(self, loss: Tensor, visit: Callable[[str], None] | None = None) -> None:
        if self.consumed:
            raise TapeError("tape already replayed; record the forward pass on a new GradTape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        produced = {id(rec[2]) for rec in self.records}
        for name, inputs, output, fn in reversed(self.records):
            g = grads.pop(id(output), None)
            if g is None:
                continue
            if visit is not None:
                visit(name)
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads[key].astype(t.data.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.records.clear()


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable, name: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(name, inputs, out, fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf feeding ``loss``."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise TapeError("loss is not connected to any gradient tape")
    loss._tape.backward(loss)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    k = math.sqrt(2.0 / math.pi)
    inner = k * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def fn(g):
        dinner = k * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result(out.astype(xd.dtype, copy=False), (x,), fn, "gelu")


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise Huber-style loss: 0.5 x^2 inside |x| < 1, |x| - 0.5 outside."""
    x = as_tensor(x)
    xd = x.data
    inside = np.abs(xd) < 1.0
    out = np.where(inside, 0.5 * xd * xd, np.abs(xd) - 0.5).astype(xd.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * np.where(inside, xd, np.sign(xd)),), "smooth_l1")


# --------------------------------------------------------------------------
# shape ops
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes of ``a`` batch.

    A 1-d ``a`` is treated as a single row and the result squeezed back.
    """
    a, b = _pair(a, b)
    if a.ndim == 1 and b.ndim == 2:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[1],))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), fn, "matmul")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn, "concat")


def take(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing with scatter-add backward."""
    xd = x.data

    def fn(g):
        out = np.zeros_like(xd)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.array(xd[index]), (x,), fn, "take")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    wd = weight.data

    def fn(g):
        out = np.zeros_like(wd)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, wd.shape[1]))
        return (out,)

    return _result(wd[ids], (weight,), fn, "embedding")


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    shape = x.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), fn, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


# --------------------------------------------------------------------------
# normalisation, softmax, losses
# --------------------------------------------------------------------------

def rms_norm(x: Tensor, weight: Tensor, eps: float) -> Tensor:
    xd, wd = x.data, weight.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    normed = xd * inv
    d = xd.shape[-1]

    def fn(g):
        gw = None
        if weight.requires_grad:
            gw = (g * normed).reshape(-1, d).sum(axis=0)
        gn = g * wd
        gx = inv * (gn - normed * (gn * normed).mean(axis=-1, keepdims=True))
        return gx, gw

    return _result((normed * wd).astype(xd.dtype, copy=False), (x, weight), fn, "rms_norm")


def softmax(x: Tensor, temperature: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis of ``x / temperature``.

    ``mask`` (broadcastable boolean, True = visible) removes entries before
    normalisation; every row must keep at least one visible entry.
    """
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    x = as_tensor(x)
    z = x.data / x.dtype.type(temperature) if temperature != 1.0 else x.data
    if mask is not None:
        z = np.where(mask, z, x.dtype.type(_MASK_FILL))
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    inv_t = 1.0 / temperature

    def fn(g):
        return ((out * (g - (g * out).sum(axis=-1, keepdims=True))) * inv_t,)

    return _result(out, (x,), fn, "softmax")


def cross_entropy(p, q: Tensor) -> Tensor:
    """-sum_k p_k log q_k over the last axis, with q clamped at 1e-12.

    Zero-probability teacher entries contribute exactly zero. Leading axes
    are kept, so a [V] input yields a scalar and [..., V] yields [...].
    """
    p = as_tensor(p, dtype=q.dtype if isinstance(q, Tensor) else None)
    q = as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"cross_entropy shape mismatch: {p.shape} vs {q.shape}")
    pd, qd = p.data, q.data
    clamped = np.maximum(qd, qd.dtype.type(LOG_CLAMP))
    logq = np.log(clamped)
    terms = np.where(pd > 0, pd * logq, 0.0)
    out = -terms.sum(axis=-1)

    def fn(g):
        ge = np.expand_dims(g, -1)
        gq = np.where(qd > LOG_CLAMP, -ge * pd / clamped, 0.0) if q.requires_grad else None
        gp = -ge * np.where(pd > 0, logq, 0.0) if p.requires_grad else None
        return gp, gq

    return _result(np.asarray(out, dtype=qd.dtype), (p, q), fn, "cross_entropy")


def global_norm(tensors: Iterable[Tensor]) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    return math.sqrt(total)
