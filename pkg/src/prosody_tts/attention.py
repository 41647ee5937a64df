"""Windowed self-attention with learned relative-position bilinear forms.

For query row i and key row j within distance ``window`` (T), the score is
``q_i^T W[i - j] k_j`` where ``W`` holds one d_head x d_head matrix per
offset in -T..T.  Pairs further apart are masked out.  There is no
positional encoding anywhere, so a block accepts any sequence length with a
fixed parameter count.

Scores are evaluated only on the band ``|i - j| <= T`` and stored as
(heads, n, 2T+1) arrays whose column ``t`` holds offset ``t - T``.  The
dense n x n layout is available for inspection and as a test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ConfigurationError, DimensionError
from .tensor import DTYPE, Tensor


@dataclass
class LocalAttentionParams:
    """Per-head projections plus 2T+1 relative-position matrices per head.

    Shapes: ``w_q, w_k, w_v`` (H, d_model, d_head); ``w_loc`` (H, 2T+1,
    d_head, d_head); ``w_out`` (H * d_head, d_model).
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_loc: Tensor
    w_out: Tensor
    window: int

    def __post_init__(self):
        heads, d_model, d_head = self.w_q.shape
        if self.window < 0:
            raise ConfigurationError(f"window must be >= 0, got {self.window}")
        if self.w_loc.shape != (heads, 2 * self.window + 1, d_head, d_head):
            raise ConfigurationError(
                f"w_loc must hold 2T+1={2 * self.window + 1} matrices per head, got shape {self.w_loc.shape}")
        if d_model != heads * d_head:
            raise ConfigurationError(f"d_model={d_model} is not heads*d_head={heads}*{d_head}")
        for name in ("w_k", "w_v"):
            if getattr(self, name).shape != self.w_q.shape:
                raise ConfigurationError(f"{name} shape {getattr(self, name).shape} != w_q shape {self.w_q.shape}")
        if self.w_out.shape != (heads * d_head, d_model):
            raise ConfigurationError(f"w_out shape {self.w_out.shape} != {(heads * d_head, d_model)}")

    @property
    def heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_model(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_head(self) -> int:
        return self.w_q.shape[2]


@dataclass
class LocalAttentionBlockParams:
    attn: LocalAttentionParams
    conv1_w: Tensor  # (k, d_model, d_ff)
    conv1_b: Tensor
    conv2_w: Tensor  # (k, d_ff, d_model)
    conv2_b: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    dropout: float = 0.0

    def __post_init__(self):
        k = self.conv1_w.shape[0]
        if k % 2 == 0 or self.conv2_w.shape[0] % 2 == 0:
            raise ConfigurationError(f"block conv kernels must be odd, got {k} and {self.conv2_w.shape[0]}")
        d = self.attn.d_model
        if self.conv1_w.shape[1] != d or self.conv2_w.shape[2] != d:
            raise ConfigurationError("block convs must map d_model -> d_ff -> d_model")


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


def init_local_attention(rng: np.random.Generator, d_model: int, heads: int, window: int) -> LocalAttentionParams:
    if heads < 1 or d_model % heads:
        raise ConfigurationError(f"d_model={d_model} must split evenly over heads={heads}")
    d_head = d_model // heads
    proj = lambda: tn.parameter(glorot(rng, (heads, d_model, d_head), d_model, d_head))
    w_loc = np.broadcast_to(0.1 * np.eye(d_head, dtype=DTYPE), (heads, 2 * window + 1, d_head, d_head)).copy()
    w_loc[:, window] = np.eye(d_head, dtype=DTYPE)
    return LocalAttentionParams(
        w_q=proj(), w_k=proj(), w_v=proj(),
        w_loc=tn.parameter(w_loc),
        w_out=tn.parameter(glorot(rng, (heads * d_head, d_model), heads * d_head, d_model)),
        window=window,
    )


def init_block(rng, d_model: int, heads: int, window: int, kernel: int = 3,
               d_ff: int | None = None, dropout: float = 0.0) -> LocalAttentionBlockParams:
    if kernel % 2 == 0:
        raise ConfigurationError(f"conv kernel size must be odd, got {kernel}")
    d_ff = d_ff or d_model
    return LocalAttentionBlockParams(
        attn=init_local_attention(rng, d_model, heads, window),
        conv1_w=tn.parameter(glorot(rng, (kernel, d_model, d_ff), kernel * d_model, d_ff)),
        conv1_b=tn.parameter(np.zeros(d_ff)),
        conv2_w=tn.parameter(glorot(rng, (kernel, d_ff, d_model), kernel * d_ff, d_model)),
        conv2_b=tn.parameter(np.zeros(d_model)),
        ln1_g=tn.parameter(np.ones(d_model)), ln1_b=tn.parameter(np.zeros(d_model)),
        ln2_g=tn.parameter(np.ones(d_model)), ln2_b=tn.parameter(np.zeros(d_model)),
        dropout=dropout,
    )


def project_qkv(h: Tensor, params: LocalAttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    """Queries, keys and values for every head, each shaped (H, n, d_head)."""
    if h.ndim != 2 or h.shape[1] != params.d_model:
        raise DimensionError(f"expected input of shape (n, {params.d_model}), got {h.shape}")
    return tn.matmul(h, params.w_q), tn.matmul(h, params.w_k), tn.matmul(h, params.w_v)


def band_mask(n: int, window: int) -> np.ndarray:
    """(n, 2T+1) boolean mask; column t is offset i - j = t - T."""
    i = np.arange(n)[:, None]
    j = i - (np.arange(2 * window + 1)[None, :] - window)
    return (j >= 0) & (j < n)


def _shift_index(n: int, window: int) -> np.ndarray:
    # row i, column t -> index of key j = i - (t - T) inside keys padded by T on each side
    return np.arange(n)[None, :] + 2 * window - np.arange(2 * window + 1)[:, None]


def band_scores(q: Tensor, k: Tensor, w_loc: Tensor) -> Tensor:
    """Banded bilinear scores ``S[h, i, t] = q[h,i] @ w_loc[h,t] @ k[h, i-t+T]``.

    Out-of-range keys contribute 0; callers mask them.
    """
    heads, n, d = q.shape
    if k.shape != q.shape:
        raise DimensionError(f"q and k shapes differ: {q.shape} vs {k.shape}")
    width = w_loc.shape[1]
    window = (width - 1) // 2
    if w_loc.shape != (heads, width, d, d) or width % 2 == 0:
        raise DimensionError(f"w_loc shape {w_loc.shape} incompatible with q {q.shape}")
    qd, kd, wd = q.data, k.data, w_loc.data
    idx = _shift_index(n, window)
    kp = np.pad(kd, ((0, 0), (window, window), (0, 0)))
    k_shift = kp[:, idx]                       # (H, 2T+1, n, d)
    q_w = np.einsum("hid,htde->htie", qd, wd)  # (H, 2T+1, n, d)
    scores = np.einsum("htie,htie->hit", q_w, k_shift)

    def backward(g):
        gt = g.transpose(0, 2, 1)[..., None]   # (H, 2T+1, n, 1)
        g_qw = gt * k_shift
        g_kshift = gt * q_w
        gq = np.einsum("htie,htde->hid", g_qw, wd)
        gw = np.einsum("hid,htie->htde", qd, g_qw)
        gkp = np.zeros_like(kp)
        for t in range(width):
            start = 2 * window - t
            gkp[:, start:start + n] += g_kshift[:, t]
        return gq, gkp[:, window:window + n], gw

    return tn.custom_op(scores, (q, k, w_loc), backward, "band_scores")


def band_combine(weights: Tensor, v: Tensor) -> Tensor:
    """``out[h, i] = sum_t weights[h, i, t] * v[h, i-t+T]`` over in-range keys."""
    heads, n, width = weights.shape
    window = (width - 1) // 2
    wd, vd = weights.data, v.data
    idx = _shift_index(n, window)
    vp = np.pad(vd, ((0, 0), (window, window), (0, 0)))
    v_shift = vp[:, idx]                       # (H, 2T+1, n, d)
    out = np.einsum("hit,htid->hid", wd, v_shift)

    def backward(g):
        gw = np.einsum("hid,htid->hit", g, v_shift)
        g_vshift = wd.transpose(0, 2, 1)[..., None] * g[:, None]
        gvp = np.zeros_like(vp)
        for t in range(width):
            start = 2 * window - t
            gvp[:, start:start + n] += g_vshift[:, t]
        return gw, gvp[:, window:window + n]

    return tn.custom_op(out, (weights, v), backward, "band_combine")


def band_to_dense(band: Tensor) -> tuple[Tensor, np.ndarray]:
    """Scatter (H, n, 2T+1) band values into (H, n, n); returns values and mask."""
    heads, n, width = band.shape
    window = (width - 1) // 2
    valid = band_mask(n, window)
    rows, cols = np.nonzero(valid)
    keys = rows - (cols - window)
    dense = np.zeros((heads, n, n), dtype=band.data.dtype)
    dense[:, rows, keys] = band.data[:, rows, cols]
    mask = np.zeros((n, n), dtype=bool)
    mask[rows, keys] = True

    def backward(g):
        gb = np.zeros(band.shape, dtype=g.dtype)
        gb[:, rows, cols] = g[:, rows, keys]
        return (gb,)

    return tn.custom_op(dense, (band,), backward, "band_to_dense"), mask


def _clip_window(w_loc: Tensor, window: int, n: int) -> tuple[Tensor, int]:
    # offsets beyond n - 1 can never be in range; drop them
    eff = min(window, n - 1)
    if eff == window:
        return w_loc, window
    return tn.getitem(w_loc, (slice(None), slice(window - eff, window + eff + 1))), eff


def _with_heads(x: Tensor, ndim: int) -> Tensor:
    return tn.reshape(x, (1,) + x.shape) if x.ndim == ndim else x


def relative_scores(q: Tensor, k: Tensor, w_loc: Tensor, window: int) -> tuple[Tensor, np.ndarray]:
    """Dense relative-position score matrix A and its |i-j| <= T mask.

    Accepts single-head inputs (q, k: n x d; w_loc: 2T+1 x d x d) or stacked
    heads.  Out-of-window entries of A are 0 and excluded by the mask.
    """
    single = q.ndim == 2
    q3, k3, w4 = _with_heads(q, 2), _with_heads(k, 2), _with_heads(w_loc, 3)
    if w4.shape[1] != 2 * window + 1:
        raise DimensionError(f"w_loc has {w4.shape[1]} offsets, expected 2T+1={2 * window + 1}")
    w4, eff = _clip_window(w4, window, q3.shape[1])
    dense, mask = band_to_dense(band_scores(q3, k3, w4))
    return (tn.reshape(dense, dense.shape[1:]) if single else dense), mask


def dense_relative_scores(q, k, w_loc, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Reference evaluation over all n x n pairs in float64, then masked."""
    q = np.asarray(getattr(q, "data", q), dtype=np.float64)
    k = np.asarray(getattr(k, "data", k), dtype=np.float64)
    w = np.asarray(getattr(w_loc, "data", w_loc), dtype=np.float64)
    single = q.ndim == 2
    if single:
        q, k, w = q[None], k[None], w[None]
    n = q.shape[1]
    offsets = np.arange(n)[:, None] - np.arange(n)[None, :]
    mask = np.abs(offsets) <= window
    scores = np.zeros((q.shape[0], n, n))
    for h in range(q.shape[0]):
        for i in range(n):
            for j in range(n):
                if mask[i, j]:
                    scores[h, i, j] = q[h, i] @ w[h, offsets[i, j] + window] @ k[h, j]
    return (scores[0] if single else scores), mask


def local_attention(h: Tensor, params: LocalAttentionParams) -> Tensor:
    """Multi-head windowed attention; output has the input's shape."""
    n = h.shape[0]
    q, k, v = project_qkv(h, params)
    w_loc, window = _clip_window(params.w_loc, params.window, n)
    scores = tn.mul(band_scores(q, k, w_loc), 1.0 / np.sqrt(params.d_head))
    weights = tn.masked_softmax(scores, band_mask(n, window))
    context = band_combine(weights, v)                   # (H, n, d_head)
    merged = tn.reshape(tn.transpose(context, (1, 0, 2)), (n, params.heads * params.d_head))
    return tn.matmul(merged, params.w_out)


def attention_weights(h: Tensor, params: LocalAttentionParams) -> np.ndarray:
    """Post-softmax weights as dense (H, n, n) arrays, for inspection."""
    with tn.no_record():
        n = h.shape[0]
        q, k, _ = project_qkv(h, params)
        w_loc, window = _clip_window(params.w_loc, params.window, n)
        scores = tn.mul(band_scores(q, k, w_loc), 1.0 / np.sqrt(params.d_head))
        weights = tn.masked_softmax(scores, band_mask(n, window))
        dense, _ = band_to_dense(weights)
    return dense.data


def local_attention_block(h: Tensor, params: LocalAttentionBlockParams, train: bool = False,
                          rng: np.random.Generator | None = None) -> Tensor:
    """Attention sublayer then a two-layer conv sublayer, each residual + layer norm."""
    p = params.dropout
    attn = tn.dropout(local_attention(h, params.attn), p, rng, train)
    y1 = tn.layer_norm(tn.add(h, attn), params.ln1_g, params.ln1_b)
    ff = tn.conv1d(tn.relu(tn.conv1d(y1, params.conv1_w, params.conv1_b)), params.conv2_w, params.conv2_b)
    ff = tn.dropout(ff, p, rng, train)
    return tn.layer_norm(tn.add(y1, ff), params.ln2_g, params.ln2_b)
