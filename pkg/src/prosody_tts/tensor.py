"""Minimal reverse-mode automatic differentiation on float32 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded on it in
execution order; :meth:`Tape.backward` replays them in exact reverse order.
Outside a tape, operations run eagerly and record nothing, which is how
inference is done.

A tape is single-use: ``backward`` consumes it, and a second call raises
:class:`~prosody_tts.errors.TapeError`.  Each thread has its own stack of
active tapes, so independent sequences can be differentiated concurrently
against shared, read-only parameters.
"""

from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DimensionError,
    InvariantError,
    NonFiniteError,
    TapeError,
)

DTYPE = np.float32

_local = threading.local()
_dtype = DTYPE
_debug = os.environ.get("PROSODY_TTS_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Turn per-op finiteness assertions on or off (process wide)."""
    global _debug
    _debug = bool(flag)


def is_debug() -> bool:
    return _debug


@contextlib.contextmanager
def debug_mode(flag: bool = True):
    previous = _debug
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(previous)


def get_dtype():
    """Current engine precision (float32 unless inside :func:`precision`)."""
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Run the engine at another float precision, e.g. float64 for test oracles."""
    global _dtype
    previous = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = previous


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_record():
    """Suspend recording on the current thread (values only, no gradients)."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """Dense float32 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_dtype)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._tape = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
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
        if self._tape is None:
            raise TapeError("tensor was not produced on an active tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

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


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; every op run inside the ``with`` block whose
    inputs require gradients is appended.  ``backward`` visits the records in
    exact reverse order and then clears the tape.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable, str]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeError("tape has already been consumed by backward")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    @property
    def ops(self) -> list[str]:
        return [rec[3] for rec in self._records]

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable, op: str) -> None:
        if self._consumed:
            raise TapeError("cannot record on a consumed tape")
        out.requires_grad = True
        out._tape = self
        self._records.append((out, parents, backward, op))

    def _run(self, loss: Tensor) -> tuple[dict[int, np.ndarray], dict[int, Tensor]]:
        if self._consumed:
            raise TapeError("backward was already called on this tape")
        if not self._records:
            raise TapeError("tape is empty; nothing to differentiate")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        if loss.size != 1 or loss.ndim > 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")

        produced = {id(rec[0]) for rec in self._records}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, parents, backward, _ in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key not in produced:
                    leaves[key] = parent
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
        self._records.clear()
        self._consumed = True
        return {k: grads[k] for k in leaves}, leaves

    def gradients(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Consume the tape and return ``{id(leaf): grad}`` without touching ``.grad``."""
        grads, _ = self._run(loss)
        return grads

    def backward(self, loss: Tensor) -> None:
        """Consume the tape, accumulating into ``.grad`` of every leaf tensor."""
        grads, leaves = self._run(loss)
        for key, tensor in leaves.items():
            g = grads[key].astype(tensor.data.dtype, copy=False).reshape(tensor.shape)
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def backward(loss: Tensor) -> None:
    loss.backward()


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` receives the output gradient and returns one gradient (or
    ``None``) per parent, in order.
    """
    out = Tensor._wrap(np.asarray(data, dtype=_dtype))
    if _debug and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, tuple(parents), backward, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return custom_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return custom_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return custom_op(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return custom_op(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return custom_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return custom_op(a.data * keep, (a,), lambda g: (g * keep,), "relu")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return custom_op(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return custom_op(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def maximum(a: Tensor, floor: float) -> Tensor:
    """Clamp from below by a constant; gradient passes where ``a > floor``."""
    keep = a.data > floor
    return custom_op(np.maximum(a.data, a.data.dtype.type(floor)), (a,), lambda g: (g * keep,), "maximum")


# ------------------------------------------------------------------ reductions

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _normalize_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return custom_op(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([shape[i] for i in axes])) if axes else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape),)

    return custom_op(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward, "mean")


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = a.data
    peak = x.max(axis=axis, keepdims=True)
    shifted = np.exp(x - peak)
    total = shifted.sum(axis=axis, keepdims=True)
    out = np.log(total) + peak
    soft = shifted / total

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return custom_op(out if keepdims else np.squeeze(out, axis=axis), (a,), backward, "logsumexp")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return custom_op(out, (a,), backward, "log_softmax")


# -------------------------------------------------------------------- shaping

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return custom_op(a.data[index], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def take_rows(table: Tensor, index) -> Tensor:
    """Gather rows ``table[index]``; the gradient scatter-adds back into the table."""
    index = np.asarray(index, dtype=np.int64)
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return custom_op(table.data[index], (table,), backward, "take_rows")


# --------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return custom_op(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ----------------------------------------------------------------- nn kernels

def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Length-preserving 1D convolution with zero padding.

    ``x`` is (n, c_in), ``kernel`` is (k, c_in, c_out) with odd k, and
    ``out[t] = sum_j x[t + j - k//2] @ kernel[j]``.
    """
    if x.ndim != 2 or kernel.ndim != 3 or kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"conv1d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    k, c_in, c_out = kernel.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d kernel size must be odd, got {k}")
    n = x.shape[0]
    pad = k // 2
    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=0)  # (n, c_in, k)
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1)).reshape(n, k * c_in)
    kmat = kernel.data.reshape(k * c_in, c_out)
    out = cols @ kmat

    def backward(g):
        gk = (cols.T @ g).reshape(kernel.shape)
        gcols = (g @ kmat.T).reshape(n, k, c_in)
        gxp = np.zeros((n + 2 * pad, c_in), dtype=g.dtype)
        for j in range(k):
            gxp[j:j + n] += gcols[:, j]
        return gxp[pad:pad + n], gk

    y = custom_op(out, (x, kernel), backward, "conv1d")
    return y if bias is None else add(y, bias)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean and unit variance, then apply gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm expects gain/bias of shape ({d},), got {gain.shape}, {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    gd = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return custom_op(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Softmax over the last axis restricted to ``mask == True`` entries.

    Masked entries come out exactly zero.  Every row needs at least one
    unmasked entry.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask.any(axis=-1).all():
        raise InvariantError("masked_softmax: a row has every entry masked")
    s = np.where(mask, scores.data, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(s), 0.0).astype(scores.data.dtype)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return custom_op(p, (scores,), backward, "masked_softmax")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None, train: bool = True) -> Tensor:
    """Inverted dropout: zero with rate ``p`` and rescale survivors by 1/(1-p)."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {p}")
    if rng is None:
        raise ConfigurationError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor._wrap(keep))


def embedding_lookup(table: Tensor, ids: Iterable[int]) -> Tensor:
    ids = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64)
    bad = ids[(ids < 0) | (ids >= table.shape[0])]
    if bad.size:
        raise IndexError(f"embedding id {int(bad[0])} out of range for table of {table.shape[0]} rows")
    return take_rows(table, ids)


__all__ = [
    "DTYPE", "get_dtype", "precision", "Tensor", "Tape", "parameter", "as_tensor", "custom_op", "backward",
    "active_tape", "no_record", "set_debug", "is_debug", "debug_mode",
    "add", "sub", "mul", "div", "neg", "exp", "log", "relu", "abs_", "square", "maximum",
    "sum_", "mean", "logsumexp", "log_softmax", "reshape", "transpose", "getitem", "concat",
    "take_rows", "matmul", "linear", "conv1d", "layer_norm", "masked_softmax", "dropout",
    "embedding_lookup",
]
