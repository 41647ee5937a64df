"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

import contextlib
from typing import Callable

import numpy as np

from . import tensor as tn
from .errors import DeterminismError, DimensionError
from .tensor import Tape, Tensor, no_record


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def analytic_gradient(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    probe = Tensor(x.data, requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    if out.size != 1:
        raise DimensionError(f"gradient check needs a scalar function, got shape {out.shape}")
    grads = tape.gradients(out) if len(tape) else {}
    return np.asarray(grads.get(id(probe), np.zeros(x.shape)), dtype=np.float64).reshape(x.shape)


def numeric_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> np.ndarray:
    dtype = tn.get_dtype()
    base = np.array(x.data, dtype=dtype)
    flat = base.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    with no_record():
        for i in range(flat.size):
            orig = flat[i]
            plus, minus = dtype(orig + h), dtype(orig - h)
            flat[i] = plus
            f_plus = float(f(Tensor(base)).item())
            flat[i] = minus
            f_minus = float(f(Tensor(base)).item())
            flat[i] = orig
            # divide by the step actually taken after rounding to the engine dtype
            grad[i] = (f_plus - f_minus) / (float(plus) - float(minus))
    return grad.reshape(base.shape)


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3, dtype=None,
                    oracle_dtype=None) -> float:
    """Max elementwise relative error between tape and central-difference gradients.

    The error at each element is ``|a - n| / max(1e-8, |a| + |n|)``.  ``f``
    must be deterministic; two evaluations at ``x`` are compared bitwise
    first and a mismatch raises :class:`DeterminismError`.

    ``dtype`` sets the precision of the tape gradient (default: the engine
    precision, float32).  ``oracle_dtype`` sets the precision of the finite
    differences (default: same as ``dtype``).  A float32 central difference
    carries rounding noise of roughly ``eps32 * |f| / h``, which swamps small
    gradient entries, so checking float32 tapes against a float64 oracle
    isolates errors in the tape itself.
    """
    ctx = tn.precision(dtype) if dtype is not None else contextlib.nullcontext()
    with ctx:
        with no_record():
            first = f(Tensor(x.data)).data.copy()
            second = f(Tensor(x.data)).data
        if not np.array_equal(first, second):
            raise DeterminismError("function under gradient check is not deterministic")
        analytic = analytic_gradient(f, x)
        if oracle_dtype is None:
            numeric = numeric_gradient(f, x, h)
    if oracle_dtype is not None:
        with tn.precision(oracle_dtype):
            numeric = numeric_gradient(f, Tensor(np.asarray(x.data, dtype=oracle_dtype)), h)
    return float(relative_error(analytic, numeric).max())
