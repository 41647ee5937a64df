"""Shared fixtures: the toy corpus and one trained two-stage pipeline per session."""

import copy
import time

import numpy as np
import pytest

from prosody_tts.corpus import synthetic_corpus
from prosody_tts.model import ModelConfig
from prosody_tts.prosody import StubWordEmbeddings
from prosody_tts.training import extract_prosody_targets, stage1_train, stage2_train

# 50 utterances, 40 for training and 10 held out
TOY_COUNT = 50
TOY_SEED = 7
TOY_SPLIT = 0.8


def make_tiny_config(**overrides) -> ModelConfig:
    """A few-thousand-parameter model for fast unit tests."""
    values = dict(n_symbols=10, d_model=16, heads=2, window=2, d_ff=16, encoder_blocks=1,
                  decoder_blocks=1, duration_blocks=1, learner_layers=2, predictor_convs=1,
                  predictor_blocks=1, prosody_dim=2, mixtures=2, word_dim=8, dropout=0.0,
                  steps=20, batch_size=2, warmup_steps=10, stage2_steps=20, stage2_batch_size=2)
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture(scope="session")
def toy_corpus():
    return synthetic_corpus(TOY_COUNT, TOY_SEED, TOY_SPLIT)


@pytest.fixture(scope="session")
def small_corpus():
    return synthetic_corpus(6, 3, 0.8)


@pytest.fixture(scope="session")
def timings():
    """Wall-clock seconds of the session's training runs, keyed by stage."""
    return {}


@pytest.fixture(scope="session")
def stage1(toy_corpus, timings):
    """Desk-preset stage-1 checkpoint on the toy corpus (about two minutes)."""
    start = time.perf_counter()
    ckpt = stage1_train(toy_corpus, ModelConfig.desk())
    timings["stage1"] = time.perf_counter() - start
    return ckpt


@pytest.fixture(scope="session")
def stage2(stage1, toy_corpus, timings):
    """(checkpoint after stage 2, its stage-1 parent, extracted targets)."""
    start = time.perf_counter()
    ckpt = copy.deepcopy(stage1)
    targets = extract_prosody_targets(ckpt, toy_corpus.train)
    ckpt = stage2_train(ckpt, toy_corpus.train, targets, StubWordEmbeddings(ckpt.config.word_dim))
    timings["stage2"] = time.perf_counter() - start
    return ckpt, stage1, targets


@pytest.fixture
def tiny_config():
    return make_tiny_config


@pytest.fixture
def rng():
    return np.random.default_rng(0)


CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """Records and prints one pass/fail line for an acceptance criterion."""
    def record(number: int, passed: bool, detail: str) -> str:
        line = f"criterion {number}: {'pass' if passed else 'fail'} {detail}"
        request.config.stash[CRITERIA][number] = line
        print(line)
        return line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
