"""Two-stage training: stage 1 fits the aligner, acoustic model and prosody
learner jointly; stage 2 fits the prosody predictor on frozen learner outputs.

Each utterance gets its own tape.  Per-utterance gradients are summed in
batch order, so the result does not depend on how many worker threads
computed them.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tn
from .alignment import Alignment, forward_sum_loss, length_regulator, viterbi_durations
from .corpus import Corpus, Utterance
from .errors import DimensionError, InvariantError, StageOrderError, TrainingDivergedError
from .model import (
    Model,
    ModelConfig,
    alignment_stats,
    decoder_forward,
    encoder_forward,
    init_model,
    reconstruct,
    teacher_durations,
)
from .prosody import StubWordEmbeddings, mdn_nll, prosody_learner, prosody_mapping, prosody_predictor
from .tensor import Tensor


# --------------------------------------------------------------- optimizer

def transformer_lr(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5), for step >= 1."""
    step = max(step, 1)
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# -------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    model: Model
    optimizer: Adam
    step: int = 0
    history: dict[str, list[dict]] = field(default_factory=lambda: {"stage1": [], "stage2": []})

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    @property
    def stage(self) -> int:
        return self.model.stage


# ------------------------------------------------------------------ stage 1

def _rng_for(seed: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, index])


def stage1_loss(model: Model, utt: Utterance, phase: str = "full", durations=None,
                rng: np.random.Generator | None = None, lambda_dur: float | None = None,
                lambda_align: float | None = None) -> tuple[Tensor, dict[str, float]]:
    """Joint stage-1 objective for one utterance.

    ``phase="align"`` trains only the aligner (the warm-up).  In the full
    phase the mel L1, the log-duration L2 and the alignment term are summed;
    ``durations`` is the teacher alignment (Viterbi from the current aligner
    when omitted).
    """
    cfg = model.config
    lambda_dur = cfg.lambda_dur if lambda_dur is None else lambda_dur
    lambda_align = cfg.lambda_align if lambda_align is None else lambda_align
    train = cfg.dropout > 0 and rng is not None
    mel = utt.mel
    parts = {}
    stats = alignment_stats(model, utt.phonemes, train, rng)
    align_loss = forward_sum_loss(stats, mel)
    parts["align"] = float(align_loss.data)
    if phase == "align":
        return align_loss, parts
    if phase != "full":
        raise ValueError(f"unknown phase {phase!r}")
    if durations is None:
        durations = viterbi_durations(stats, mel)
    align = durations if isinstance(durations, Alignment) else Alignment(durations)
    align.check(len(utt.phonemes), utt.frames)
    rep = prosody_learner(mel, align, model.learner)
    hidden, _, log_d = encoder_forward(model, utt.phonemes, prosody_mapping(rep, model.mapping), train, rng,
                                       with_alignment=False)
    pred = decoder_forward(model, length_regulator(hidden, align), train, rng)
    mel_loss = tn.mean(tn.abs_(tn.sub(pred, mel)))
    target_log_d = np.log(align.durations.astype(np.float64))
    dur_loss = tn.mean(tn.square(tn.sub(log_d, target_log_d)))
    parts["mel"] = float(mel_loss.data)
    parts["dur"] = float(dur_loss.data)
    loss = tn.add(tn.add(mel_loss, tn.mul(dur_loss, lambda_dur)), tn.mul(align_loss, lambda_align))
    return loss, parts


def _per_utterance(loss_fn: Callable, params: dict[str, Tensor]):
    def run(args):
        with tn.Tape() as tape:
            loss, parts = loss_fn(*args)
            grads = tape.gradients(loss)
        out = {}
        for name, p in params.items():
            g = grads.get(id(p))
            out[name] = np.zeros_like(p.data) if g is None else g
        return float(loss.data), parts, out
    return run


def _reduce(results, params: dict[str, Tensor]):
    """Average losses, parts and gradients in batch order."""
    k = len(results)
    grads = {name: np.zeros_like(p.data) for name, p in params.items()}
    parts: dict[str, float] = {}
    loss = 0.0
    for value, part, g in results:
        loss += value
        for key, x in part.items():
            parts[key] = parts.get(key, 0.0) + x
        for name in grads:
            grads[name] += g[name]
    for g in grads.values():
        g /= k
    return loss / k, {key: x / k for key, x in parts.items()}, grads


def _batches(count: int, batch_size: int, seed: int):
    """Endless stream of index batches from seeded per-epoch permutations."""
    epoch = 0
    while True:
        order = np.random.default_rng([seed, epoch]).permutation(count)
        for start in range(0, count, batch_size):
            yield order[start:start + batch_size].tolist()
        epoch += 1


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def stage1_train(corpus: Corpus | list[Utterance], config: ModelConfig | None = None, seed: int | None = None,
                 workers: int = 1, fixed_durations: bool = False, steps: int | None = None,
                 checkpoint: Checkpoint | None = None, callback: Callable | None = None,
                 stop: Callable[[Checkpoint], bool] | None = None, eval_every: int = 100) -> Checkpoint:
    """Train aligner, acoustic model and prosody learner on the training split.

    With ``fixed_durations`` the stored durations (or ground truth) replace
    Viterbi teacher alignments and the warm-up is skipped.  ``stop`` is polled
    every ``eval_every`` steps and ends training early when it returns True.
    """
    utts = corpus.train if isinstance(corpus, Corpus) else list(corpus)
    if not utts:
        raise InvariantError("stage-1 training needs at least one training utterance")
    config = config or ModelConfig()
    seed = config.seed if seed is None else seed
    if checkpoint is None:
        model = init_model(config, seed)
        checkpoint = Checkpoint(model, Adam(config.adam_beta1, config.adam_beta2, config.adam_eps))
    model = checkpoint.model
    params = model.stage1_parameters()
    total = config.steps if steps is None else steps
    warm = 0 if fixed_durations else int(config.align_warmup * total)
    oracle = None
    if fixed_durations:
        oracle = []
        for u in utts:
            d = u.durations if u.durations is not None else u.gt_durations
            if d is None:
                raise InvariantError(f"utterance {u.id}: fixed durations requested but none are stored")
            oracle.append(d)
    run = _per_utterance(lambda *a: stage1_loss(model, *a), params)
    batches = _batches(len(utts), config.batch_size, seed)
    history = checkpoint.history["stage1"]
    last_finite = history[-1]["loss"] if history else float("nan")
    for _ in range(total):
        step = checkpoint.step + 1
        phase = "align" if step <= warm else "full"
        batch = next(batches)
        jobs = [(utts[i], phase, None if oracle is None else oracle[i],
                 _rng_for(seed, step, i) if config.dropout > 0 else None) for i in batch]
        loss, parts, grads = _reduce(_map(run, jobs, workers), params)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step, last_finite)
        norm = clip_global_norm(grads, config.clip_norm)
        lr = transformer_lr(step, config.d_model, config.warmup_steps, config.lr_scale)
        model.stage = 1
        checkpoint.optimizer.step(params, grads, lr)
        checkpoint.step = step
        last_finite = loss
        record = {"step": step, "phase": phase, "loss": loss, "lr": lr, "grad_norm": norm, **parts}
        history.append(record)
        if callback is not None:
            callback(record)
        if stop is not None and phase == "full" and step % eval_every == 0 and stop(checkpoint):
            break
    return checkpoint


# ------------------------------------------------------------- evaluation

def mel_l1(model: Model, utts: list[Utterance], prosody: str = "oracle", durations: str = "viterbi") -> float:
    """Frame-weighted teacher-forced mel L1 over ``utts`` (dropout off)."""
    total, frames = 0.0, 0
    for u in utts:
        d = None if durations == "viterbi" else (u.gt_durations if durations == "gt" else u.durations)
        pred = reconstruct(model, u.phonemes, u.mel, d, prosody)
        total += float(np.abs(pred.astype(np.float64) - u.mel).sum())
        frames += u.mel.size
    return total / frames


def utterance_l1(model: Model, utt: Utterance, prosody="oracle", durations=None) -> float:
    pred = reconstruct(model, utt.phonemes, utt.mel, durations, prosody)
    return float(np.mean(np.abs(pred.astype(np.float64) - utt.mel)))


def duration_mae(model: Model, utts: list[Utterance]) -> float:
    """Mean absolute frame error of Viterbi durations against ground truth."""
    errors = []
    for u in utts:
        if u.gt_durations is None:
            continue
        errors.append(np.abs(teacher_durations(model, u.phonemes, u.mel).durations - u.gt_durations))
    if not errors:
        raise InvariantError("no utterance carries ground-truth durations")
    return float(np.mean(np.concatenate(errors)))


def extract_prosody_targets(checkpoint: Checkpoint | Model, utts: list[Utterance],
                            durations: str = "viterbi") -> dict[str, np.ndarray]:
    """Learner output per utterance from the stage-1 model, dropout off.

    ``durations="stored"`` uses each utterance's recorded alignment and
    raises if one is missing.
    """
    model = checkpoint.model if isinstance(checkpoint, Checkpoint) else checkpoint
    if model.stage < 1:
        raise StageOrderError("prosody extraction needs a stage-1 checkpoint")
    out = {}
    with tn.no_record():
        for u in utts:
            if durations == "stored":
                if u.durations is None:
                    raise InvariantError(f"utterance {u.id}: no alignment stored for prosody extraction")
                align = Alignment(u.durations)
            else:
                align = teacher_durations(model, u.phonemes, u.mel)
            out[u.id] = prosody_learner(u.mel, align, model.learner).data.copy()
    return out


# ------------------------------------------------------------------ stage 2

def prosody_nll(model: Model, utts: list[Utterance], targets: dict[str, np.ndarray], provider=None) -> float:
    provider = provider if provider is not None else StubWordEmbeddings(model.config.word_dim)
    with tn.no_record():
        values = [float(mdn_nll(prosody_predictor(u.phonemes, provider, model.predictor), targets[u.id]).data)
                  for u in utts]
    return float(np.mean(values))


def stage2_train(checkpoint: Checkpoint, utts: list[Utterance], targets: dict[str, np.ndarray],
                 provider=None, steps: int | None = None, workers: int = 1, seed: int | None = None,
                 callback: Callable | None = None) -> Checkpoint:
    """Fit the prosody predictor; every stage-1 tensor stays byte-identical."""
    model = checkpoint.model
    config = model.config
    if model.stage < 1:
        raise StageOrderError("stage 2 needs a trained stage-1 checkpoint; run stage 1 first")
    if not utts:
        raise InvariantError("stage-2 training needs at least one utterance")
    for u in utts:
        if u.id not in targets:
            raise InvariantError(f"utterance {u.id}: no prosody target")
        t = targets[u.id]
        if t.ndim != 2 or t.shape[1] != config.prosody_dim:
            raise DimensionError(f"utterance {u.id}: target width {t.shape[-1]} but the model "
                                 f"expects prosody_dim={config.prosody_dim}")
        if t.shape[0] != len(u.phonemes):
            raise InvariantError(f"utterance {u.id}: {t.shape[0]} target rows for {len(u.phonemes)} phonemes")
    provider = provider if provider is not None else StubWordEmbeddings(config.word_dim)
    seed = config.seed if seed is None else seed
    params = model.stage2_parameters()
    optimizer = Adam(config.adam_beta1, config.adam_beta2, config.adam_eps)
    total = config.stage2_steps if steps is None else steps

    def loss_fn(utt, rng):
        loss = mdn_nll(prosody_predictor(utt.phonemes, provider, model.predictor, rng is not None, rng),
                       targets[utt.id])
        return loss, {"nll": float(loss.data)}

    run = _per_utterance(loss_fn, params)
    history = checkpoint.history["stage2"] = [{"step": 0, "nll": prosody_nll(model, utts, targets, provider)}]
    batches = _batches(len(utts), config.stage2_batch_size, seed + 1)
    last_finite = history[0]["nll"]
    for step in range(1, total + 1):
        batch = next(batches)
        jobs = [(utts[i], _rng_for(seed + 1, step, i) if config.dropout > 0 else None) for i in batch]
        loss, parts, grads = _reduce(_map(run, jobs, workers), params)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step, last_finite)
        norm = clip_global_norm(grads, config.clip_norm)
        lr = transformer_lr(step, config.d_model, config.warmup_steps, config.stage2_lr_scale)
        optimizer.step(params, grads, lr)
        last_finite = loss
        record = {"step": step, "loss": loss, "lr": lr, "grad_norm": norm, **parts}
        history.append(record)
        if callback is not None:
            callback(record)
    history.append({"step": total, "final_nll": prosody_nll(model, utts, targets, provider)})
    model.stage = 2
    checkpoint.optimizer = optimizer
    return checkpoint


# ------------------------------------------------------------ sweep harness

@dataclass
class SweepResult:
    prosody_dim: int
    steps: int
    train_l1: float
    test_l1: float
    zero_l1: float
    converged: bool

    def line(self) -> str:
        return (f"prosody_dim={self.prosody_dim} steps={self.steps} train_l1={self.train_l1:.6f} "
                f"test_l1={self.test_l1:.6f} zero_prosody_l1={self.zero_l1:.6f} converged={int(self.converged)}")


def dimension_sweep(corpus: Corpus, dims=(1, 3, 6, 10), config: ModelConfig | None = None,
                    target_l1: float = 0.05, eval_every: int = 100, workers: int = 1,
                    max_steps: int | None = None) -> list[SweepResult]:
    """Stage-1 training per prosody width, stopping once train L1 < ``target_l1``.

    Each run may take up to ``max_steps`` (twice the configured steps by
    default) since narrow prosody widths converge more slowly.
    """
    config = config or ModelConfig()
    max_steps = 2 * config.steps if max_steps is None else max_steps
    results = []
    for dim in dims:
        cfg = config.replace(prosody_dim=dim)
        ckpt = stage1_train(corpus, cfg, workers=workers, eval_every=eval_every, steps=max_steps,
                            stop=lambda c: mel_l1(c.model, corpus.train) < target_l1)
        train = mel_l1(ckpt.model, corpus.train)
        results.append(SweepResult(dim, ckpt.step, train, mel_l1(ckpt.model, corpus.test) if corpus.test else float("nan"),
                                   mel_l1(ckpt.model, corpus.train, prosody="zero"), train < target_l1))
    return results


def sweep_report(results: list[SweepResult]) -> str:
    return "\n".join(r.line() for r in results) + "\n"
