"""Self-check suites behind ``prosody-tts verify``.

Every check compares the implementation against an independent oracle
(central differences, dense loops, explicit enumeration or closed forms)
and reports a value, its threshold and pass/fail.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .alignment import EmissionStats, emission_log_likelihood, forward_sum, forward_sum_loss, viterbi
from .attention import (
    attention_weights,
    dense_relative_scores,
    init_block,
    init_local_attention,
    local_attention,
    local_attention_block,
    project_qkv,
    relative_scores,
)
from .features import PhonemeSequence
from .gradcheck import check_gradients
from .prosody import (
    MdnParams,
    StubWordEmbeddings,
    init_prosody_learner,
    init_prosody_predictor,
    mdn_nll,
    mdn_sample,
    mixture_mean,
    prosody_learner,
    prosody_predictor,
)
from .tensor import Tensor

OP_TOLERANCE = 1e-3
BLOCK_TOLERANCE = 1e-2
STEP = 1e-3


@dataclass
class CheckResult:
    suite: str
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "pass" if self.passed else "fail"
        extra = f" detail={self.detail}" if self.detail else ""
        return f"suite={self.suite} check={self.name} value={self.value:.3e} threshold={self.threshold:.1e} status={status}{extra}"


def _below(suite, name, value, threshold, detail="") -> CheckResult:
    return CheckResult(suite, name, float(value), threshold, bool(value < threshold), detail)


# ------------------------------------------------------------- gradients

def _swap(obj, attr: str, build: Callable[[], Tensor]) -> Callable[[Tensor], Tensor]:
    """Scalar function of one parameter: install the probe, build, restore."""
    def f(x: Tensor) -> Tensor:
        saved = getattr(obj, attr)
        setattr(obj, attr, x)
        try:
            return build()
        finally:
            setattr(obj, attr, saved)
    return f


def _projected(fn: Callable[[Tensor], Tensor], shape, rng) -> Callable[[Tensor], Tensor]:
    # magnitudes bounded away from zero keep every gradient entry well above the checker's noise
    weights = _away_from_zero(rng, shape, 0.5)
    return lambda x: tn.sum_(tn.mul(fn(x), weights))


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.uniform(margin, 1.5, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def op_gradient_cases(rng) -> list[tuple[str, Callable, np.ndarray]]:
    """(name, scalar function, input) for every differentiable primitive."""
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    mat = rng.standard_normal((4, 5))
    kernel = rng.standard_normal((3, 4, 2)) * 0.5
    gain = rng.uniform(0.5, 1.5, 4)
    mask = np.tril(np.ones((4, 4), bool))
    idx = np.array([2, 0, 2, 1])
    cases = []

    def add(name, fn, x, out_shape):
        cases.append((name, _projected(fn, out_shape, rng), x))

    add("add", lambda x: tn.add(x, b), a, (3, 4))
    add("sub", lambda x: tn.sub(b, x), a, (3, 4))
    add("mul", lambda x: tn.mul(x, b), a, (3, 4))
    add("div", lambda x: tn.div(b, x), pos, (3, 4))
    add("neg", tn.neg, a, (3, 4))
    add("exp", tn.exp, a, (3, 4))
    add("log", tn.log, pos, (3, 4))
    add("relu", tn.relu, _away_from_zero(rng, (3, 4)), (3, 4))
    add("abs", tn.abs_, _away_from_zero(rng, (3, 4)), (3, 4))
    add("square", tn.square, a, (3, 4))
    add("maximum", lambda x: tn.maximum(x, 0.0), _away_from_zero(rng, (3, 4)), (3, 4))
    add("sum_axis", lambda x: tn.sum_(x, axis=1), a, (3,))
    add("mean_axis", lambda x: tn.mean(x, axis=0), a, (4,))
    add("logsumexp", lambda x: tn.logsumexp(x, axis=1), a, (3,))
    add("log_softmax", lambda x: tn.log_softmax(x, axis=1), a, (3, 4))
    add("reshape", lambda x: tn.reshape(x, (4, 3)), a, (4, 3))
    add("transpose", lambda x: tn.transpose(x), a, (4, 3))
    add("getitem", lambda x: tn.getitem(x, (slice(None), slice(1, 3))), a, (3, 2))
    add("concat", lambda x: tn.concat([x, Tensor(b)], axis=0), a, (6, 4))
    add("take_rows", lambda x: tn.take_rows(x, idx), a, (4, 4))
    add("matmul", lambda x: tn.matmul(x, mat), a, (3, 5))
    add("linear", lambda x: tn.linear(Tensor(a), x, Tensor(np.ones(5))), mat, (3, 5))
    add("conv1d_input", lambda x: tn.conv1d(x, Tensor(kernel)), a, (3, 2))
    add("conv1d_kernel", lambda x: tn.conv1d(Tensor(a), x, Tensor(np.zeros(2))), kernel, (3, 2))
    add("layer_norm_input", lambda x: tn.layer_norm(x, Tensor(gain), Tensor(np.zeros(4))), a, (3, 4))
    add("layer_norm_gain", lambda x: tn.layer_norm(Tensor(a), x, Tensor(np.zeros(4))), gain, (3, 4))
    add("masked_softmax", lambda x: tn.masked_softmax(x, mask), rng.standard_normal((4, 4)), (4, 4))
    add("dropout", lambda x: tn.dropout(x, 0.3, np.random.default_rng(3), True), a, (3, 4))
    add("embedding_lookup", lambda x: tn.embedding_lookup(x, [2, 0, 2]), a, (3, 4))

    stats_mel = rng.standard_normal((5, 4))
    logv = rng.uniform(-0.5, 0.5, (3, 4))
    add("emission_means", lambda x: emission_log_likelihood(EmissionStats(x, Tensor(logv)), stats_mel),
        rng.standard_normal((3, 4)), (5, 3))
    add("emission_log_vars", lambda x: emission_log_likelihood(EmissionStats(Tensor(b), x), stats_mel),
        logv, (5, 3))
    cases.append(("forward_sum", lambda x: forward_sum(x), rng.standard_normal((6, 3))))

    mdn_target = rng.standard_normal((2, 3))
    logits = rng.standard_normal((2, 2))
    means = rng.standard_normal((2, 2, 3))
    log_vars = rng.uniform(-0.5, 0.5, (2, 2, 3))
    cases.append(("mdn_logits", lambda x: mdn_nll(MdnParams(x, Tensor(means), Tensor(log_vars)), mdn_target), logits))
    cases.append(("mdn_means", lambda x: mdn_nll(MdnParams(Tensor(logits), x, Tensor(log_vars)), mdn_target), means))
    cases.append(("mdn_log_vars", lambda x: mdn_nll(MdnParams(Tensor(logits), Tensor(means), x), mdn_target),
                  log_vars))

    q = rng.standard_normal((2, 5, 3))
    k = rng.standard_normal((2, 5, 3))
    w_loc = rng.standard_normal((2, 5, 3, 3)) * 0.5
    cases.append(("relative_scores_q", _projected(lambda x: relative_scores(x, Tensor(k), Tensor(w_loc), 2)[0],
                                                  (2, 5, 5), rng), q))
    cases.append(("relative_scores_w_loc", _projected(lambda x: relative_scores(Tensor(q), Tensor(k), x, 2)[0],
                                                      (2, 5, 5), rng), w_loc))
    return cases


def block_gradient_cases(seed: int = 0) -> list[tuple[str, Callable, np.ndarray]]:
    """Composed blocks: attention block, learner, predictor, full stage-1 loss."""
    from .model import ModelConfig, init_model
    from .training import stage1_loss
    from .corpus import Utterance

    rng = np.random.default_rng(seed)
    cases = []

    block = init_block(rng, 8, 2, 2, 3, 8, 0.0)
    h = rng.standard_normal((6, 8))
    proj = rng.standard_normal((6, 8))
    out = lambda: tn.sum_(tn.mul(local_attention_block(Tensor(h), block), proj))
    cases.append(("attention_block_input",
                  lambda x: tn.sum_(tn.mul(local_attention_block(x, block), proj)), h))
    cases.append(("attention_block_w_loc", _swap(block.attn, "w_loc", out), block.attn.w_loc.data))
    cases.append(("attention_block_conv1", _swap(block, "conv1_w", out), block.conv1_w.data))

    learner = init_prosody_learner(rng, 6, 8, 2, layers=2)
    mel = rng.standard_normal((7, 6))
    durations = np.array([2, 3, 2])
    weights = rng.standard_normal((3, 2))
    learn = lambda: tn.sum_(tn.mul(prosody_learner(mel, durations, learner), weights))
    cases.append(("prosody_learner_mel",
                  lambda x: tn.sum_(tn.mul(prosody_learner(x, durations, learner), weights)), mel))
    cases.append(("prosody_learner_proj", _swap(learner, "proj_w", learn), learner.proj_w.data))

    predictor = init_prosody_predictor(rng, 5, 8, 6, 2, 2, 1, 2, 2, d_ff=8, convs=1)
    phon = PhonemeSequence([1, 3, 0, 4], 5, ["a", "b"], [2, 2])
    provider = StubWordEmbeddings(6)
    target = rng.standard_normal((4, 2))
    nll = lambda: mdn_nll(prosody_predictor(phon, provider, predictor), target)
    cases.append(("prosody_predictor_head", _swap(predictor, "head_w", nll), predictor.head_w.data))
    cases.append(("prosody_predictor_word", _swap(predictor, "word_w", nll), predictor.word_w.data))

    cfg = ModelConfig(n_symbols=3, n_mels=4, d_model=8, heads=2, window=2, d_ff=8, align_blocks=1,
                      encoder_blocks=1, decoder_blocks=1, duration_blocks=1, learner_layers=2,
                      predictor_convs=1, predictor_blocks=1, prosody_dim=2, mixtures=2, word_dim=4,
                      dropout=0.0)
    model = init_model(cfg, seed)
    utt = Utterance("grad", PhonemeSequence([0, 2], 3), rng.standard_normal((6, 4)).astype(np.float32))
    full = lambda: stage1_loss(model, utt, "full", durations=[3, 3])[0]
    cases.append(("stage1_loss_embedding", _swap(model, "embedding", full), model.embedding.data))
    cases.append(("stage1_loss_mel_head", _swap(model, "mel_w", full), model.mel_w.data))
    cases.append(("stage1_loss_align_mean", _swap(model, "align_mean_w", full), model.align_mean_w.data))
    cases.append(("stage1_loss_mapping", _swap(model.mapping, "weight", full), model.mapping.weight.data))
    cases.append(("stage1_loss_duration", _swap(model, "duration_w", full), model.duration_w.data))
    return cases


def gradient_suite(seed: int = 0) -> list[CheckResult]:
    """Finite-difference checks of every primitive and composed block.

    Each case runs twice: entirely in float64 (``op.*``, ``block.*``) and with
    the tape in float32 against a float64 difference oracle (``op32.*``,
    ``block32.*``).
    """
    results = []
    start = time.perf_counter()
    runs = [("", np.float64, np.float64), ("32", np.float32, np.float64)]
    for suffix, dtype, oracle in runs:
        rng = np.random.default_rng(seed)
        with tn.precision(dtype):
            ops = op_gradient_cases(rng)
            blocks = block_gradient_cases(seed)
        for name, fn, x in ops:
            err = check_gradients(fn, Tensor(x), STEP, dtype=dtype, oracle_dtype=oracle)
            results.append(_below("gradients", f"op{suffix}.{name}", err, OP_TOLERANCE))
        for name, fn, x in blocks:
            err = check_gradients(fn, Tensor(x), STEP, dtype=dtype, oracle_dtype=oracle)
            results.append(_below("gradients", f"block{suffix}.{name}", err, BLOCK_TOLERANCE))
    results.append(_below("gradients", "runtime_seconds", time.perf_counter() - start, 120.0))
    return results


# ------------------------------------------------------------- attention

def scaled_dot_product(h: np.ndarray, params) -> np.ndarray:
    """Standard multi-head attention in float64, no mask, no relative terms."""
    h = np.asarray(h, dtype=np.float64)
    heads = []
    for i in range(params.heads):
        q = h @ params.w_q.data[i].astype(np.float64)
        k = h @ params.w_k.data[i].astype(np.float64)
        v = h @ params.w_v.data[i].astype(np.float64)
        s = q @ k.T / np.sqrt(params.d_head)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        heads.append((s / s.sum(axis=1, keepdims=True)) @ v)
    return np.concatenate(heads, axis=1) @ params.w_out.data.astype(np.float64)


def attention_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []

    params = init_local_attention(rng, 16, 2, 3)
    h = Tensor(rng.standard_normal((12, 16)))
    w = attention_weights(h, params)
    band = np.abs(np.arange(12)[:, None] - np.arange(12)[None, :]) <= 3
    out.append(_below("attention", "row_sum_error", np.abs(w.sum(axis=-1) - 1.0).max(), 1e-6))
    outside = float(np.abs(w[:, ~band]).max())
    out.append(CheckResult("attention", "outside_band_max", outside, 0.0, outside == 0.0))

    n = 9
    tied = init_local_attention(rng, 16, 2, n - 1)
    tied.w_loc.data[...] = np.eye(tied.d_head)
    h2 = rng.standard_normal((n, 16))
    with tn.no_record():
        got = local_attention(Tensor(h2), tied).data
    out.append(_below("attention", "tied_w_loc_vs_dot_product", np.abs(got - scaled_dot_product(h2, tied)).max(),
                      1e-5))

    with tn.precision(np.float64), tn.no_record():
        p64 = init_local_attention(rng, 12, 3, 2)
        q, k, _ = project_qkv(Tensor(rng.standard_normal((10, 12))), p64)
        p64.w_loc.data[...] = rng.standard_normal(p64.w_loc.shape)
        fast, mask = relative_scores(q, k, p64.w_loc, 2)
        slow, slow_mask = dense_relative_scores(q, k, p64.w_loc, 2)
    gap = np.abs(np.where(slow_mask, fast.data - slow, 0.0)).max()
    ok = gap < 1e-6 and np.array_equal(mask, slow_mask)
    out.append(CheckResult("attention", "banded_vs_dense", float(gap), 1e-6, bool(ok)))

    block = init_block(rng, 16, 2, 4, 3, 32, 0.0)
    for length in (1, 5, 50, 500):
        try:
            with tn.no_record():
                y = local_attention_block(Tensor(rng.standard_normal((length, 16))), block)
            ok = y.shape == (length, 16) and bool(np.all(np.isfinite(y.data)))
            detail = ""
        except Exception as exc:  # report rather than abort the suite
            ok, detail = False, type(exc).__name__
        out.append(CheckResult("attention", f"length_{length}", float(length), 0.0, ok, detail))
    return out


# ------------------------------------------------------------- alignment

def brute_force_alignment(e: np.ndarray) -> tuple[float, float]:
    """(log-sum, max) over every monotonic segmentation of an (n, m) matrix."""
    n, m = e.shape
    totals = []
    for cuts in itertools.combinations(range(1, n), m - 1):
        bounds = (0, *cuts, n)
        totals.append(sum(e[bounds[i]:bounds[i + 1], i].sum() for i in range(m)))
    totals = np.array(totals)
    top = totals.max()
    return float(top + np.log(np.exp(totals - top).sum())), float(top)


def reference_emissions(means, log_vars, mel) -> np.ndarray:
    var = np.exp(log_vars)
    diff = mel[:, None, :] - means[None, :, :]
    return -0.5 * (np.log(2 * np.pi * var)[None] + diff ** 2 / var[None]).sum(axis=-1)


def alignment_suite(seed: int = 0, instances: int = 100) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    shapes = [(n, m) for n in range(1, 7) for m in range(1, n + 1)]
    worst = 0.0
    viterbi_ok = True
    order_ok = True
    max_gap = 0.0
    with tn.precision(np.float64), tn.no_record():
        for i in range(instances):
            n, m = shapes[i % len(shapes)]
            means = rng.standard_normal((m, 3))
            log_vars = rng.uniform(-1.0, 1.0, (m, 3))
            mel = rng.standard_normal((n, 3))
            ref_sum, ref_max = brute_force_alignment(reference_emissions(means, log_vars, mel))
            loss = forward_sum_loss(EmissionStats(Tensor(means), Tensor(log_vars)), mel, normalize=False)
            worst = max(worst, abs(-float(loss.data) - ref_sum))
            e = emission_log_likelihood(EmissionStats(Tensor(means), Tensor(log_vars)), mel).data
            d, logp = viterbi(e)
            viterbi_ok &= bool(d.size == m and d.sum() == n and (d >= 1).all())
            order_ok &= logp <= -float(loss.data) + 1e-9
            max_gap = max(max_gap, abs(logp - ref_max))
    return [
        _below("alignment", "forward_sum_vs_enumeration", worst, 1e-4),
        CheckResult("alignment", "viterbi_valid", float(viterbi_ok), 1.0, viterbi_ok),
        CheckResult("alignment", "viterbi_below_forward_sum", float(order_ok), 1.0, order_ok),
        _below("alignment", "viterbi_vs_enumerated_max", max_gap, 1e-4),
    ]


# ------------------------------------------------------------------- mdn

def mdn_suite(seed: int = 0, samples: int = 100_000) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    d = 3
    target = rng.standard_normal((4, d))
    single = MdnParams(Tensor(np.zeros((4, 1))), Tensor(target[:, None, :]), Tensor(np.zeros((4, 1, d))))
    with tn.no_record():
        nll = float(mdn_nll(single, target).data)
    out.append(_below("mdn", "unit_gaussian_nll", abs(nll - 0.5 * d * np.log(2 * np.pi)), 1e-4))

    mix = MdnParams(Tensor(rng.standard_normal((5, 3))), Tensor(rng.standard_normal((5, 3, d))),
                    Tensor(rng.uniform(-1.0, 0.5, (5, 3, d))))
    draw = mdn_sample(mix, np.random.default_rng(seed), temperature=0.0, mode="sample")
    exact = all(any(np.array_equal(draw[i], mix.means.data[i, c]) for c in range(3)) for i in range(5))
    out.append(CheckResult("mdn", "temperature_zero_is_mean", float(exact), 1.0, exact))

    logits = np.tile(rng.standard_normal((1, 3)), (samples, 1))
    means = np.tile(rng.standard_normal((1, 3, d)), (samples, 1, 1))
    log_vars = np.tile(rng.uniform(-1.0, 0.5, (1, 3, d)), (samples, 1, 1))
    big = MdnParams(Tensor(logits), Tensor(means), Tensor(log_vars))
    draws = mdn_sample(big, np.random.default_rng(seed + 1), temperature=1.0).astype(np.float64)
    w = big.weights()[0]
    mu = means[0].astype(np.float64)
    var = np.exp(log_vars[0].astype(np.float64))
    expected = mixture_mean(MdnParams(Tensor(logits[:1]), Tensor(means[:1]), Tensor(log_vars[:1])))[0]
    second = (w[:, None] * (var + mu ** 2)).sum(axis=0)
    stderr = np.sqrt((second - expected ** 2) / samples)
    z = float(np.max(np.abs(draws.mean(axis=0) - expected) / stderr))
    out.append(_below("mdn", "monte_carlo_mean_z", z, 3.0))
    return out


SUITES: dict[str, Callable[[], list[CheckResult]]] = {
    "gradients": gradient_suite,
    "attention": attention_suite,
    "alignment": alignment_suite,
    "mdn": mdn_suite,
}


def run_suites(name: str = "all") -> list[CheckResult]:
    if name == "all":
        return [r for suite in SUITES.values() for r in suite()]
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)} or 'all'")
    return SUITES[name]()
