"""Monotonic phoneme-to-frame alignment.

Each phoneme i emits mel frames from a diagonal Gaussian N(mu_i, sigma_i^2).
A segmentation assigns every frame to one phoneme, in order, with every
phoneme covering at least one frame and no skips.  The forward-sum loss is
the negative log of the total probability over all such segmentations;
Viterbi picks the single most probable one and reports it as durations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import DimensionError, InfeasibleAlignmentError, InvariantError
from .tensor import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class Alignment:
    """Frames per phoneme, in phoneme order."""

    durations: np.ndarray

    def __post_init__(self):
        self.durations = np.asarray(self.durations, dtype=np.int64).reshape(-1)
        if self.durations.size == 0:
            raise InvariantError("alignment has no phonemes")
        if (self.durations < 1).any():
            raise InvariantError(f"every duration must be >= 1, got {self.durations.tolist()}")

    @property
    def frames(self) -> int:
        return int(self.durations.sum())

    def __len__(self) -> int:
        return self.durations.size

    def check(self, phonemes: int, frames: int) -> None:
        if len(self) != phonemes or self.frames != frames:
            raise InvariantError(
                f"alignment covers {len(self)} phonemes / {self.frames} frames, "
                f"expected {phonemes} / {frames}")


@dataclass
class EmissionStats:
    """Per-phoneme Gaussian emission parameters over mel channels."""

    means: Tensor     # (m, n_mels)
    log_vars: Tensor  # (m, n_mels); variance = exp(log_vars) > 0

    @property
    def phonemes(self) -> int:
        return self.means.shape[0]


def _mel_array(mel) -> np.ndarray:
    values = getattr(mel, "values", None)
    if values is None:
        values = getattr(mel, "data", mel)
    return np.asarray(values)


def _durations(durations) -> np.ndarray:
    return durations.durations if isinstance(durations, Alignment) else Alignment(durations).durations


def emission_log_likelihood(stats: EmissionStats, mel) -> Tensor:
    """Diagonal-Gaussian log density of every frame under every phoneme, (n, m).

    Accumulated in float64 internally; the result has the engine dtype.
    """
    x = _mel_array(mel).astype(np.float64)
    mu = stats.means.data.astype(np.float64)
    s = stats.log_vars.data.astype(np.float64)
    if x.ndim != 2 or x.shape[1] != mu.shape[1] or s.shape != mu.shape:
        raise DimensionError(f"mel {x.shape} incompatible with emission stats {mu.shape}/{s.shape}")
    prec = np.exp(-s)
    x2 = x * x
    quad = x2 @ prec.T - 2.0 * x @ (mu * prec).T + (mu * mu * prec).sum(axis=1)
    out = -0.5 * (x.shape[1] * LOG_2PI + s.sum(axis=1) + quad)

    def backward(g):
        g = g.astype(np.float64)
        total = g.sum(axis=0)[:, None]      # (m, 1)
        gx = g.T @ x                        # (m, d)
        d_mu = prec * (gx - total * mu)
        weighted_sq = g.T @ x2 - 2.0 * mu * gx + total * mu * mu
        d_s = -0.5 * (total - prec * weighted_sq)
        return d_mu, d_s

    return tn.custom_op(out, (stats.means, stats.log_vars), backward, "emission_log_likelihood")


def _forward(e: np.ndarray) -> np.ndarray:
    n, m = e.shape
    alpha = np.full((n, m), -np.inf)
    alpha[0, 0] = e[0, 0]
    for t in range(1, n):
        prev = alpha[t - 1]
        advance = np.concatenate(([-np.inf], prev[:-1]))
        alpha[t] = np.logaddexp(prev, advance) + e[t]
    return alpha


def _backward(e: np.ndarray) -> np.ndarray:
    n, m = e.shape
    beta = np.full((n, m), -np.inf)
    beta[n - 1, m - 1] = 0.0
    for t in range(n - 2, -1, -1):
        nxt = beta[t + 1] + e[t + 1]
        advance = np.concatenate((nxt[1:], [-np.inf]))
        beta[t] = np.logaddexp(nxt, advance)
    return beta


def forward_sum(log_emissions: Tensor, normalize: bool = True) -> Tensor:
    """-log of the summed probability of all monotonic segmentations.

    ``log_emissions`` is (n frames, m phonemes).  With ``normalize`` the
    result is divided by n.  The gradient is minus the state posterior.
    """
    n, m = log_emissions.shape
    if m > n:
        raise InfeasibleAlignmentError(f"{m} phonemes cannot align to {n} frames")
    e = log_emissions.data.astype(np.float64)
    with np.errstate(invalid="ignore"):
        alpha = _forward(e)
    log_total = alpha[n - 1, m - 1]
    scale = 1.0 / n if normalize else 1.0

    def backward(g):
        with np.errstate(invalid="ignore"):
            beta = _backward(e)
            posterior = np.exp(alpha + beta - log_total)
        return (-float(g) * scale * np.nan_to_num(posterior),)

    return tn.custom_op(np.array(-log_total * scale), (log_emissions,), backward, "forward_sum")


def forward_sum_loss(stats: EmissionStats, mel, normalize: bool = True) -> Tensor:
    mel = _mel_array(mel)
    if stats.phonemes > mel.shape[0]:
        raise InfeasibleAlignmentError(f"{stats.phonemes} phonemes cannot align to {mel.shape[0]} frames")
    return forward_sum(emission_log_likelihood(stats, mel), normalize)


def viterbi(log_emissions) -> tuple[np.ndarray, float]:
    """Best monotonic segmentation of an (n, m) log-emission matrix.

    Returns (durations, path log-probability).  On ties the backtrace takes
    the phoneme transition, so earlier phonemes get the longer share.
    """
    e = np.asarray(getattr(log_emissions, "data", log_emissions), dtype=np.float64)
    n, m = e.shape
    if m > n:
        raise InfeasibleAlignmentError(f"{m} phonemes cannot align to {n} frames")
    delta = np.full((n, m), -np.inf)
    came_from_prev = np.zeros((n, m), dtype=bool)
    delta[0, 0] = e[0, 0]
    for t in range(1, n):
        stay = delta[t - 1]
        advance = np.concatenate(([-np.inf], stay[:-1]))
        came_from_prev[t] = advance >= stay
        delta[t] = np.where(came_from_prev[t], advance, stay) + e[t]
    durations = np.zeros(m, dtype=np.int64)
    i = m - 1
    for t in range(n - 1, -1, -1):
        durations[i] += 1
        if t > 0 and i > 0 and came_from_prev[t, i]:
            i -= 1
    return durations, float(delta[n - 1, m - 1])


def viterbi_durations(stats: EmissionStats, mel) -> Alignment:
    with tn.no_record():
        e = emission_log_likelihood(stats, mel)
    durations, _ = viterbi(e.data)
    return Alignment(durations)


def expansion_index(durations) -> np.ndarray:
    d = _durations(durations)
    return np.repeat(np.arange(d.size), d)


def length_regulator(seq: Tensor, durations) -> Tensor:
    """Repeat row i of ``seq`` durations[i] times, preserving order."""
    d = _durations(durations)
    if d.size != seq.shape[0]:
        raise InvariantError(f"{d.size} durations for a sequence of {seq.shape[0]} rows")
    return tn.take_rows(seq, expansion_index(d))


def pooling_matrix(durations) -> np.ndarray:
    """(m, n) matrix whose row i averages phoneme i's frames."""
    d = _durations(durations)
    pool = np.zeros((d.size, int(d.sum())), dtype=tn.get_dtype())
    pool[expansion_index(d), np.arange(int(d.sum()))] = 1.0
    return pool / d[:, None]


def durations_from_predictor(log_durations, scale: float = 1.0) -> Alignment:
    """round-half-even(exp(log_d) * scale), clamped below at 1."""
    log_d = np.asarray(getattr(log_durations, "data", log_durations), dtype=np.float64).reshape(-1)
    return Alignment(np.maximum(np.rint(np.exp(log_d) * scale), 1).astype(np.int64))
