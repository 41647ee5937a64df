"""Acceptance criteria 1 to 9, one test each, at their pinned tolerances.

Each test prints a ``criterion N: pass|fail ...`` line; the lines are also
collected into a summary section at the end of the pytest run.
"""

import time

import numpy as np

from prosody_tts.checkpoint import checkpoint_bytes, checkpoint_from_bytes
from prosody_tts.corpus import read_melb, write_melb
from prosody_tts.features import text_to_phonemes
from prosody_tts.model import ModelConfig, synthesize
from prosody_tts.prosody import StubWordEmbeddings
from prosody_tts.training import (
    dimension_sweep,
    duration_mae,
    mel_l1,
    stage1_train,
    sweep_report,
    utterance_l1,
)
from prosody_tts.verify import alignment_suite, attention_suite, gradient_suite, mdn_suite

TRAIN_L1 = 0.05
HELD_OUT_L1 = 0.10
DURATION_MAE = 1.0
NLL_DROP = 0.5
TIME_BUDGET = 15 * 60
SAMPLE_L1 = 0.01
SWEEP_DIMS = (1, 3, 6, 10)


def suite_detail(results):
    failed = [r.name for r in results if not r.passed]
    return f"checks={len(results)} failed={failed or 0}"


def test_criterion_1_gradient_suite(criterion):
    results = gradient_suite()
    runtime = next(r for r in results if r.name == "runtime_seconds")
    ok = all(r.passed for r in results) and runtime.value < 120.0
    criterion(1, ok, f"{suite_detail(results)} runtime={runtime.value:.1f}s")
    assert ok, "\n".join(r.line() for r in results if not r.passed)


def test_criterion_2_attention_semantics(criterion):
    results = attention_suite()
    names = {r.name for r in results}
    assert {"row_sum_error", "outside_band_max", "tied_w_loc_vs_dot_product", "banded_vs_dense",
            "length_1", "length_5", "length_50", "length_500"} <= names
    ok = all(r.passed for r in results)
    criterion(2, ok, suite_detail(results))
    assert ok, "\n".join(r.line() for r in results if not r.passed)


def test_criterion_3_alignment_oracle(criterion):
    results = alignment_suite(instances=100)
    ok = all(r.passed for r in results)
    worst = next(r.value for r in results if r.name == "forward_sum_vs_enumeration")
    criterion(3, ok, f"{suite_detail(results)} worst_log_gap={worst:.2e}")
    assert ok, "\n".join(r.line() for r in results if not r.passed)


def test_criterion_4_mdn_identities(criterion):
    results = mdn_suite(samples=100_000)
    ok = all(r.passed for r in results)
    z = next(r.value for r in results if r.name == "monte_carlo_mean_z")
    criterion(4, ok, f"{suite_detail(results)} monte_carlo_z={z:.2f}")
    assert ok, "\n".join(r.line() for r in results if not r.passed)


def test_criterion_5_toy_end_to_end(criterion, stage2, toy_corpus, timings):
    ckpt, stage1, _ = stage2
    train = mel_l1(stage1.model, toy_corpus.train)
    held_out = mel_l1(stage1.model, toy_corpus.test)
    mae = duration_mae(stage1.model, toy_corpus.utterances)
    history = ckpt.history["stage2"]
    first, last = history[0]["nll"], history[-1]["final_nll"]
    drop = (first - last) / abs(first)
    seconds = timings["stage1"] + timings["stage2"]
    ok = (train < TRAIN_L1 and held_out < HELD_OUT_L1 and mae < DURATION_MAE and drop >= NLL_DROP
          and seconds <= TIME_BUDGET)
    criterion(5, ok, f"train_l1={train:.4f} held_out_l1={held_out:.4f} duration_mae={mae:.3f} "
                     f"nll {first:.3f}->{last:.3f} drop={drop:.1%} time={seconds:.0f}s")
    assert train < TRAIN_L1
    assert held_out < HELD_OUT_L1
    assert mae < DURATION_MAE
    assert drop >= NLL_DROP
    assert seconds <= TIME_BUDGET


def test_criterion_6_prosody_separation(criterion, stage1, toy_corpus):
    pairs = [(utterance_l1(stage1.model, u, "oracle"), utterance_l1(stage1.model, u, "zero"))
             for u in toy_corpus.train]
    wins = sum(o < z for o, z in pairs)
    ok = wins == len(pairs)
    margin = min(z - o for o, z in pairs)
    criterion(6, ok, f"oracle_below_zero={wins}/{len(pairs)} min_margin={margin:.4f}")
    assert ok


def test_criterion_7_variability(criterion, stage2):
    model = stage2[0].model
    provider = StubWordEmbeddings(model.config.word_dim)
    seq = text_to_phonemes("1.2.3 4.5 6.7.8.9 2.4", inventory_size=model.config.n_symbols)
    a, _, _ = synthesize(model, seq, provider, seed=1, mode="sample")
    b, _, _ = synthesize(model, seq, provider, seed=2, mode="sample")
    n = min(len(a), len(b))
    sample_l1 = float(np.abs(a[:n].astype(np.float64) - b[:n]).mean())
    x, _, _ = synthesize(model, seq, provider, seed=1, mode="argmax")
    y, _, _ = synthesize(model, seq, provider, seed=2, mode="argmax")
    identical = x.tobytes() == y.tobytes()
    ok = sample_l1 > SAMPLE_L1 and identical
    criterion(7, ok, f"sample_l1={sample_l1:.4f} frames={len(a)}/{len(b)} argmax_identical={identical}")
    assert sample_l1 > SAMPLE_L1
    assert identical


def test_criterion_8_dimension_sweep(criterion, toy_corpus):
    start = time.perf_counter()
    results = dimension_sweep(toy_corpus, SWEEP_DIMS, ModelConfig.desk(), target_l1=TRAIN_L1)
    report = sweep_report(results)
    print(report, end="")
    ok = [r.prosody_dim for r in results] == list(SWEEP_DIMS) and all(r.converged for r in results)
    ok = ok and len(report.splitlines()) == len(SWEEP_DIMS)
    steps = ",".join(str(r.steps) for r in results)
    criterion(8, ok, f"converged={sum(r.converged for r in results)}/{len(results)} steps={steps} "
                     f"time={time.perf_counter() - start:.0f}s")
    assert ok, report


def test_criterion_9_serialization(criterion, stage2, tmp_path, small_corpus):
    raw = checkpoint_bytes(stage2[0])
    checkpoint_exact = checkpoint_bytes(checkpoint_from_bytes(raw)) == raw
    model = stage2[0].model
    mel, _, _ = synthesize(model, text_to_phonemes("3.1 4.1.5", inventory_size=model.config.n_symbols),
                           StubWordEmbeddings(model.config.word_dim))
    write_melb(tmp_path / "x.melb", mel)
    melb_exact = read_melb(tmp_path / "x.melb").tobytes() == np.asarray(mel, dtype=np.float32).tobytes()
    config = ModelConfig.desk(n_symbols=small_corpus.inventory_size, batch_size=4)
    curves = {}
    for workers in (1, 1, 2, 4):
        ckpt = stage1_train(small_corpus, config, steps=12, workers=workers)
        curves.setdefault(workers, []).append([r["loss"] for r in ckpt.history["stage1"]])
    reference = curves[1][0]
    curves_identical = all(c == reference for runs in curves.values() for c in runs)
    ok = checkpoint_exact and melb_exact and curves_identical
    criterion(9, ok, f"checkpoint_bit_exact={checkpoint_exact} melb_bit_exact={melb_exact} "
                     f"curves_identical_workers_1_1_2_4={curves_identical}")
    assert checkpoint_exact
    assert melb_exact
    assert curves_identical
