"""Prosody learner, prosody mapping and the mixture-density prosody predictor.

The learner turns a mel spectrogram plus a phoneme alignment into one small
vector per phoneme (the prosody representation).  The mapping network is a
single affine layer from that representation to model width, and its output
is added to the phoneme embeddings.  At inference the predictor replaces
the learner: it reads phonemes and word embeddings and emits a Gaussian
mixture per phoneme, from which a representation is sampled.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import tensor as tn
from .alignment import Alignment, length_regulator, pooling_matrix
from .attention import LocalAttentionBlockParams, glorot, init_block, local_attention_block
from .errors import DimensionError, InvariantError
from .features import PhonemeSequence
from .tensor import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
VARIANCE_FLOOR = 1e-6
LOG_VARIANCE_FLOOR = float(np.log(VARIANCE_FLOOR))


def _conv_params(rng, kernel, c_in, c_out):
    return (tn.parameter(glorot(rng, (kernel, c_in, c_out), kernel * c_in, c_out)),
            tn.parameter(np.zeros(c_out)))


# ----------------------------------------------------------------- learner

@dataclass
class ProsodyLearnerParams:
    convs: list[tuple[Tensor, Tensor]]  # first maps n_mels -> d_model, the rest are residual
    proj_w: Tensor                      # (d_model, prosody_dim)
    proj_b: Tensor

    @property
    def prosody_dim(self) -> int:
        return self.proj_w.shape[1]


def init_prosody_learner(rng, n_mels: int, d_model: int, prosody_dim: int,
                         layers: int = 4, kernel: int = 3) -> ProsodyLearnerParams:
    convs = [_conv_params(rng, kernel, n_mels, d_model)]
    convs += [_conv_params(rng, kernel, d_model, d_model) for _ in range(layers - 1)]
    return ProsodyLearnerParams(
        convs=convs,
        proj_w=tn.parameter(glorot(rng, (d_model, prosody_dim), d_model, prosody_dim)),
        proj_b=tn.parameter(np.zeros(prosody_dim)),
    )


def prosody_learner(mel, durations, params: ProsodyLearnerParams) -> Tensor:
    """(m, prosody_dim) representation: conv stack, per-phoneme mean pool, projection."""
    x = mel if isinstance(mel, Tensor) else Tensor(getattr(mel, "values", mel))
    align = durations if isinstance(durations, Alignment) else Alignment(durations)
    if align.frames != x.shape[0]:
        raise InvariantError(f"alignment covers {align.frames} frames but the mel has {x.shape[0]}")
    (k0, b0), *rest = params.convs
    h = tn.relu(tn.conv1d(x, k0, b0))
    for k, b in rest:
        h = tn.add(h, tn.relu(tn.conv1d(h, k, b)))
    pooled = tn.matmul(pooling_matrix(align), h)
    return tn.linear(pooled, params.proj_w, params.proj_b)


# ----------------------------------------------------------------- mapping

@dataclass
class ProsodyMappingParams:
    weight: Tensor  # (prosody_dim, d_model)
    bias: Tensor


def init_prosody_mapping(rng, prosody_dim: int, d_model: int) -> ProsodyMappingParams:
    return ProsodyMappingParams(
        weight=tn.parameter(glorot(rng, (prosody_dim, d_model), prosody_dim, d_model)),
        bias=tn.parameter(np.zeros(d_model)),
    )


def prosody_mapping(rep, params: ProsodyMappingParams) -> Tensor:
    rep = tn.as_tensor(rep)
    if rep.ndim != 2 or rep.shape[1] != params.weight.shape[0]:
        raise DimensionError(f"prosody representation {rep.shape} does not have width {params.weight.shape[0]}")
    return tn.linear(rep, params.weight, params.bias)


# --------------------------------------------------------- word embeddings

class WordEmbeddingProvider(Protocol):
    dim: int

    def embed(self, words: Sequence[str]) -> np.ndarray:
        """One fixed-width vector per word, deterministic for fixed input."""


class StubWordEmbeddings:
    """Hash-seeded unit vectors standing in for a pretrained language model."""

    def __init__(self, dim: int = 64):
        self.dim = dim

    def vector(self, word: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(word.encode("utf-8")).digest()[:8], "little")
        v = np.random.default_rng(seed).standard_normal(self.dim)
        return (v / np.linalg.norm(v)).astype(np.float32)

    def embed(self, words: Sequence[str]) -> np.ndarray:
        return np.stack([self.vector(w) for w in words]) if words else np.zeros((0, self.dim), np.float32)


def stub_word_embeddings(words: Sequence[str], dim: int = 64) -> np.ndarray:
    return StubWordEmbeddings(dim).embed(words)


def upsample_word_embeddings(words, spans: Sequence[int], phonemes: int | None = None) -> Tensor:
    """Repeat each word vector across its phoneme span (length-regulator semantics)."""
    spans = np.asarray(spans, dtype=np.int64)
    if phonemes is not None and int(spans.sum()) != phonemes:
        raise InvariantError(f"word spans sum to {int(spans.sum())} but there are {phonemes} phonemes")
    return length_regulator(tn.as_tensor(words), spans)


# --------------------------------------------------------------- predictor

@dataclass
class MdnParams:
    logits: Tensor    # (m, C)
    means: Tensor     # (m, C, D)
    log_vars: Tensor  # (m, C, D)

    @property
    def mixtures(self) -> int:
        return self.logits.shape[1]

    def weights(self) -> np.ndarray:
        w = self.logits.data.astype(np.float64)
        w = np.exp(w - w.max(axis=1, keepdims=True))
        return w / w.sum(axis=1, keepdims=True)


@dataclass
class ProsodyPredictorParams:
    embedding: Tensor                  # (n_symbols, d_model)
    convs: list[tuple[Tensor, Tensor]]
    word_w: Tensor                     # (word_dim, d_model)
    word_b: Tensor
    blocks: list[LocalAttentionBlockParams]
    head_w: Tensor                     # (d_model, C * (1 + 2 D))
    head_b: Tensor
    mixtures: int
    prosody_dim: int
    use_word_embeddings: bool = True


def init_prosody_predictor(rng, n_symbols: int, d_model: int, word_dim: int, prosody_dim: int,
                           mixtures: int, blocks: int, heads: int, window: int, kernel: int = 3,
                           d_ff: int | None = None, convs: int = 3, dropout: float = 0.0,
                           use_word_embeddings: bool = True) -> ProsodyPredictorParams:
    out = mixtures * (1 + 2 * prosody_dim)
    return ProsodyPredictorParams(
        embedding=tn.parameter(rng.normal(0.0, d_model ** -0.5, (n_symbols, d_model))),
        convs=[_conv_params(rng, kernel, d_model, d_model) for _ in range(convs)],
        word_w=tn.parameter(glorot(rng, (word_dim, d_model), word_dim, d_model)),
        word_b=tn.parameter(np.zeros(d_model)),
        blocks=[init_block(rng, d_model, heads, window, kernel, d_ff, dropout) for _ in range(blocks)],
        head_w=tn.parameter(glorot(rng, (d_model, out), d_model, out)),
        head_b=tn.parameter(np.zeros(out)),
        mixtures=mixtures,
        prosody_dim=prosody_dim,
        use_word_embeddings=use_word_embeddings,
    )


def prosody_predictor(phonemes: PhonemeSequence, provider: WordEmbeddingProvider | None,
                      params: ProsodyPredictorParams, train: bool = False,
                      rng: np.random.Generator | None = None) -> MdnParams:
    """Mixture parameters over the prosody representation, one mixture per phoneme.

    When ``params.use_word_embeddings`` is off, or no provider is given, the
    word branch is skipped and the output does not depend on any provider.
    """
    h = tn.embedding_lookup(params.embedding, phonemes.ids)
    for k, b in params.convs:
        h = tn.relu(tn.conv1d(h, k, b))
    if params.use_word_embeddings and provider is not None:
        if not phonemes.words:
            raise InvariantError("word branch enabled but the phoneme sequence carries no words")
        vectors = provider.embed(phonemes.words)
        up = upsample_word_embeddings(vectors, phonemes.spans, len(phonemes))
        h = tn.add(h, tn.linear(up, params.word_w, params.word_b))
    for block in params.blocks:
        h = local_attention_block(h, block, train, rng)
    out = tn.linear(h, params.head_w, params.head_b)
    m, c, d = len(phonemes), params.mixtures, params.prosody_dim
    return MdnParams(
        logits=tn.getitem(out, (slice(None), slice(0, c))),
        means=tn.reshape(tn.getitem(out, (slice(None), slice(c, c + c * d))), (m, c, d)),
        log_vars=tn.reshape(tn.getitem(out, (slice(None), slice(c + c * d, None))), (m, c, d)),
    )


def mdn_log_likelihood(params: MdnParams, target) -> Tensor:
    """Per-phoneme log mixture density, shape (m,)."""
    target = tn.as_tensor(target)
    m, c, d = params.means.shape
    if target.shape != (m, d):
        raise DimensionError(f"target {target.shape} does not match mixture over ({m}, {d})")
    log_vars = tn.maximum(params.log_vars, LOG_VARIANCE_FLOOR)
    diff = tn.sub(tn.reshape(target, (m, 1, d)), params.means)
    quad = tn.mul(tn.square(diff), tn.exp(tn.neg(log_vars)))
    log_gauss = tn.mul(tn.sum_(tn.add(tn.add(quad, log_vars), LOG_2PI), axis=2), -0.5)
    return tn.logsumexp(tn.add(tn.log_softmax(params.logits, axis=1), log_gauss), axis=1)


def mdn_nll(params: MdnParams, target) -> Tensor:
    """Mean over phonemes of the mixture negative log-likelihood."""
    return tn.neg(tn.mean(mdn_log_likelihood(params, target)))


def mixture_mean(params: MdnParams) -> np.ndarray:
    return np.einsum("mc,mcd->md", params.weights(), params.means.data.astype(np.float64))


def mdn_sample(params: MdnParams, rng: np.random.Generator | None = None, temperature: float = 1.0,
               mode: str = "sample") -> np.ndarray:
    """Draw one representation per phoneme.

    ``argmax`` returns the mean of the most probable component.  ``sample``
    draws a component from the weights, then a Gaussian draw whose standard
    deviation is scaled by ``temperature``; temperature 0 yields the chosen
    component's mean.
    """
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    weights = params.weights()
    means = params.means.data
    m = means.shape[0]
    rows = np.arange(m)
    if mode == "argmax":
        return means[rows, weights.argmax(axis=1)].astype(np.float32)
    if mode != "sample":
        raise ValueError(f"unknown sampling mode {mode!r}")
    if rng is None:
        raise ValueError("sample mode needs an explicit rng")
    cum = np.cumsum(weights, axis=1)
    pick = np.minimum((rng.random((m, 1)) > cum).sum(axis=1), weights.shape[1] - 1)
    chosen = means[rows, pick].astype(np.float64)
    if temperature == 0:
        return chosen.astype(np.float32)
    std = np.exp(0.5 * np.maximum(params.log_vars.data[rows, pick].astype(np.float64), LOG_VARIANCE_FLOOR))
    return (chosen + temperature * std * rng.standard_normal(chosen.shape)).astype(np.float32)
