"""Model assembly, configuration, inference and the trained toy pipeline."""

import numpy as np
import pytest

from prosody_tts import tensor as tn
from prosody_tts.errors import ConfigurationError, StageOrderError
from prosody_tts.features import PhonemeSequence, text_to_phonemes
from prosody_tts.model import (
    ModelConfig,
    decoder_forward,
    encoder_forward,
    init_model,
    parse_config_text,
    reconstruct,
    synthesize,
)
from prosody_tts.prosody import StubWordEmbeddings
from prosody_tts.tensor import Tensor
from prosody_tts.training import mel_l1, stage1_train, utterance_l1


class TestConfig:
    """Validation, presets and the key=value format."""

    def test_heads_divide_width(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(d_model=10, heads=3)

    def test_negative_window(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(window=-1)

    def test_counts_positive(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(encoder_blocks=0)

    def test_desk_preset(self):
        c = ModelConfig.desk()
        assert (c.d_model, c.heads, c.window, c.prosody_dim, c.mixtures) == (64, 2, 4, 3, 2)
        assert (c.encoder_blocks, c.decoder_blocks, c.duration_blocks) == (2, 2, 1)
        assert (c.adam_beta1, c.adam_beta2, c.adam_eps) == (0.9, 0.98, 1e-9)

    def test_full_scale_preset(self):
        c = ModelConfig.paper()
        assert (c.d_model, c.heads, c.kernel, c.window) == (768, 2, 3, 10)
        assert (c.encoder_blocks, c.decoder_blocks, c.duration_blocks) == (6, 6, 3)
        assert (c.learner_layers, c.predictor_blocks, c.prosody_dim) == (4, 4, 3)

    def test_config_text(self):
        values = parse_config_text("# desk run\nd_model = 32\ndropout=0.2\nuse_word_embeddings = false\n")
        assert values == {"d_model": 32, "dropout": 0.2, "use_word_embeddings": False}

    def test_config_text_unknown_key(self):
        with pytest.raises(ConfigurationError):
            parse_config_text("depth = 3")

    def test_dict_round_trip(self):
        c = ModelConfig(prosody_dim=6)
        assert ModelConfig.from_dict(c.to_dict()) == c


class TestForward:
    """Encoder, decoder and parameter bookkeeping."""

    def test_parameter_count_is_config_only(self, tiny_config):
        a, b = init_model(tiny_config(), 0), init_model(tiny_config(), 1)
        assert a.parameter_count() == b.parameter_count()
        for m in (1, 5, 40):
            encoder_forward(a, list(np.arange(m) % 10))
        assert a.parameter_count() == b.parameter_count()

    def test_encoder_length_follows_input(self, tiny_config):
        model = init_model(tiny_config(), 0)
        for m in (1, 3, 30):
            hidden, stats, log_d = encoder_forward(model, list(np.arange(m) % 10))
            assert hidden.shape == (m, 16) and log_d.shape == (m,) and stats.means.shape == (m, 80)

    def test_zero_prosody_is_additive_identity(self, tiny_config):
        model = init_model(tiny_config(), 0)
        a, _, _ = encoder_forward(model, [1, 2, 3])
        b, _, _ = encoder_forward(model, [1, 2, 3], Tensor(np.zeros((3, 16))))
        np.testing.assert_array_equal(a.data, b.data)

    def test_decoder_frames_and_determinism(self, tiny_config, rng):
        model = init_model(tiny_config(dropout=0.3), 0)
        x = Tensor(rng.standard_normal((13, 16)))
        a = decoder_forward(model, x).data
        assert a.shape == (13, 80)
        np.testing.assert_array_equal(a, decoder_forward(model, x).data)

    def test_stage_parameter_groups_partition(self, tiny_config):
        model = init_model(tiny_config(), 0)
        s1, s2 = model.stage1_parameters(), model.stage2_parameters()
        assert set(s1).isdisjoint(s2)
        assert set(s1) | set(s2) == set(model.named_parameters())
        assert all(k.startswith("predictor.") for k in s2)


class TestSynthesis:
    """Inference contract on an untrained model."""

    def test_refuses_without_stage_two(self, tiny_config):
        model = init_model(tiny_config(), 0)
        with pytest.raises(StageOrderError, match="stage-2"):
            synthesize(model, text_to_phonemes("1.2 3", inventory_size=10))

    def test_frames_equal_duration_sum(self, tiny_config):
        model = init_model(tiny_config(), 0)
        model.stage = 2
        mel, align, rep = synthesize(model, text_to_phonemes("1.2 3.4", inventory_size=10),
                                     StubWordEmbeddings(8), mode="sample", seed=3)
        assert mel.shape == (align.frames, 80)
        assert rep.shape == (4, 2)

    def test_argmax_repeatable(self, tiny_config):
        model = init_model(tiny_config(), 0)
        model.stage = 2
        seq = text_to_phonemes("5.1 2", inventory_size=10)
        a, _, _ = synthesize(model, seq, StubWordEmbeddings(8), seed=1)
        b, _, _ = synthesize(model, seq, StubWordEmbeddings(8), seed=2)
        np.testing.assert_array_equal(a, b)

    def test_duration_scale(self, tiny_config):
        model = init_model(tiny_config(), 0)
        seq = PhonemeSequence([1, 2, 3, 4, 5, 6], 10)
        rep = np.zeros((6, 2))
        _, short, _ = synthesize(model, seq, prosody=rep)
        _, long, _ = synthesize(model, seq, prosody=rep, duration_scale=2.0)
        assert long.frames > short.frames


class TestOverfit:
    """Ten utterances are memorised to per-frame L1 < 0.05."""

    def test_ten_utterances(self):
        from prosody_tts.corpus import synthetic_corpus

        corpus = synthetic_corpus(11, 21, 0.98)
        assert len(corpus.train) == 10
        ckpt = stage1_train(corpus, ModelConfig.desk(), stop=lambda c: mel_l1(c.model, corpus.train) < 0.05)
        assert mel_l1(ckpt.model, corpus.train) < 0.05


class TestTrainedPipeline:
    """Properties of the session's desk-preset toy run."""

    def test_reconstruction_deterministic(self, stage1, toy_corpus):
        u = toy_corpus.train[0]
        np.testing.assert_array_equal(reconstruct(stage1.model, u.phonemes, u.mel),
                                      reconstruct(stage1.model, u.phonemes, u.mel))

    def test_oracle_prosody_reconstruction(self, stage1, toy_corpus):
        worst = max(utterance_l1(stage1.model, u, "oracle") for u in toy_corpus.train)
        assert worst < 0.06

    def test_oracle_prosody_synthesis(self, stage2, toy_corpus):
        ckpt, _, targets = stage2
        matched = []
        for u in toy_corpus.train:
            mel, align, _ = synthesize(ckpt.model, u.phonemes, prosody=targets[u.id])
            assert np.abs(align.durations - u.gt_durations).max() <= 1
            if align.frames == u.frames:
                matched.append(float(np.abs(mel - u.mel).mean()))
        assert matched
        assert max(matched) < 0.06

    def test_sample_mode_varies(self, stage2):
        ckpt = stage2[0]
        seq = text_to_phonemes("1.2.3 4.5 6.7.8.9", inventory_size=10)
        provider = StubWordEmbeddings(ckpt.config.word_dim)
        a, da, _ = synthesize(ckpt.model, seq, provider, seed=1, mode="sample")
        b, db, _ = synthesize(ckpt.model, seq, provider, seed=2, mode="sample")
        n = min(len(a), len(b))
        assert len(da) == len(db) == len(seq)
        assert float(np.abs(a[:n] - b[:n]).mean()) > 0.01

    def test_synthesis_runs_without_recording(self, stage2):
        ckpt = stage2[0]
        with tn.no_record():
            mel, _, _ = synthesize(ckpt.model, text_to_phonemes("3.4", inventory_size=10),
                                   StubWordEmbeddings(ckpt.config.word_dim))
        assert np.all(np.isfinite(mel))
