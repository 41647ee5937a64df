"""Binary sidecars, the manifest, the toy corpus and checkpoints."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prosody_tts.checkpoint import MAGIC, checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint
from prosody_tts.corpus import (
    MELB_MAGIC,
    assign_splits,
    read_durations,
    read_manifest,
    read_melb,
    read_prosody,
    split_counts,
    synthetic_corpus,
    write_durations,
    write_manifest,
    write_melb,
    write_prosody,
)
from prosody_tts.errors import FormatError, InvariantError
from prosody_tts.model import encoder_forward
from prosody_tts.training import stage1_train


class TestMatrices:
    """MELB mels and PRSD prosody sidecars."""

    def test_melb_bit_exact(self, tmp_path, rng):
        mel = rng.standard_normal((17, 80)).astype(np.float32)
        write_melb(tmp_path / "a.melb", mel)
        back = read_melb(tmp_path / "a.melb")
        assert back.dtype == np.float32
        assert back.tobytes() == mel.tobytes()

    def test_melb_header(self, tmp_path):
        write_melb(tmp_path / "a.melb", np.zeros((2, 80)))
        raw = (tmp_path / "a.melb").read_bytes()
        assert raw[:8] == MELB_MAGIC and len(raw) == 16 + 2 * 80 * 4

    def test_melb_wrong_width(self, tmp_path):
        with pytest.raises(FormatError):
            write_melb(tmp_path / "a.melb", np.zeros((2, 40)))

    def test_bad_magic(self, tmp_path):
        write_prosody(tmp_path / "a.prsd", np.zeros((2, 80)))
        with pytest.raises(FormatError, match="bad magic"):
            read_melb(tmp_path / "a.prsd")

    def test_truncated(self, tmp_path):
        write_melb(tmp_path / "a.melb", np.zeros((3, 80)))
        raw = (tmp_path / "a.melb").read_bytes()
        (tmp_path / "b.melb").write_bytes(raw[:-4])
        (tmp_path / "c.melb").write_bytes(raw[:10])
        with pytest.raises(FormatError, match="payload"):
            read_melb(tmp_path / "b.melb")
        with pytest.raises(FormatError, match="header"):
            read_melb(tmp_path / "c.melb")

    def test_prosody_round_trip(self, tmp_path, rng):
        rep = rng.standard_normal((6, 3)).astype(np.float32)
        write_prosody(tmp_path / "p.prsd", rep)
        np.testing.assert_array_equal(read_prosody(tmp_path / "p.prsd"), rep)

    def test_durations_round_trip(self, tmp_path):
        write_durations(tmp_path / "d.dur", [3, 1, 4])
        np.testing.assert_array_equal(read_durations(tmp_path / "d.dur"), [3, 1, 4])
        (tmp_path / "e.dur").write_text("3 x\n")
        with pytest.raises(FormatError):
            read_durations(tmp_path / "e.dur")


class TestSplits:
    """Deterministic train/test assignment."""

    def test_counts(self):
        assert split_counts(100, 0.98) == (98, 2)
        assert split_counts(11, 0.98) == (10, 1)
        assert split_counts(50, 0.8) == (40, 10)
        assert split_counts(1, 0.5) == (1, 0)

    @given(st.integers(2, 500), st.floats(0.01, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_both_sides_nonempty(self, total, fraction):
        n_train, n_test = split_counts(total, fraction)
        assert n_train + n_test == total and n_train >= 1 and n_test >= 1

    def test_bad_fraction(self):
        with pytest.raises(InvariantError):
            split_counts(10, 0.0)

    def test_assignment_seeded(self):
        ids = [f"u{i}" for i in range(20)]
        assert assign_splits(ids, 0.8, 3) == assign_splits(ids, 0.8, 3)
        assert list(assign_splits(ids, 0.8, 3).values()).count("test") == 4


class TestToyCorpus:
    """Seeded synthetic utterances with known durations."""

    def test_bit_identical_per_seed(self):
        a, b = synthetic_corpus(5, 11), synthetic_corpus(5, 11)
        for u, v in zip(a.utterances, b.utterances):
            assert u.mel.tobytes() == v.mel.tobytes()
            np.testing.assert_array_equal(u.gt_durations, v.gt_durations)
            assert u.phonemes.ids == v.phonemes.ids

    def test_seed_changes_corpus(self):
        a, b = synthetic_corpus(2, 1), synthetic_corpus(2, 2)
        assert a.utterances[0].mel.tobytes() != b.utterances[0].mel.tobytes()

    def test_ground_truth_is_valid_alignment(self, toy_corpus):
        for u in toy_corpus.utterances:
            assert u.gt_durations.size == len(u.phonemes)
            assert u.gt_durations.sum() == u.frames and (u.gt_durations >= 1).all()
            assert u.mel.shape[1] == 80 and np.all(np.isfinite(u.mel))


class TestManifest:
    """JSONL manifest with sidecar files."""

    def test_round_trip(self, tmp_path, small_corpus):
        small_corpus.utterances[0].prosody = np.ones((len(small_corpus.utterances[0].phonemes), 3))
        try:
            write_manifest(tmp_path / "m.jsonl", small_corpus)
        finally:
            small_corpus.utterances[0].prosody = None
        back = read_manifest(tmp_path / "m.jsonl")
        assert back.inventory_size == small_corpus.inventory_size
        for u, v in zip(small_corpus.utterances, back.utterances):
            assert (u.id, u.split, u.phonemes.ids, u.phonemes.spans) == (v.id, v.split, v.phonemes.ids, v.phonemes.spans)
            assert u.mel.tobytes() == v.mel.tobytes()
            np.testing.assert_array_equal(u.gt_durations, v.gt_durations)
        assert back.utterances[0].prosody.shape[1] == 3

    def edit_record(self, path, index, **changes):
        lines = path.read_text().splitlines()
        rec = json.loads(lines[index])
        rec.update(changes)
        lines[index] = json.dumps(rec)
        path.write_text("\n".join(lines) + "\n")

    @pytest.fixture
    def manifest(self, tmp_path, small_corpus):
        write_manifest(tmp_path / "m.jsonl", small_corpus)
        return tmp_path / "m.jsonl"

    def test_missing_field(self, manifest):
        lines = manifest.read_text().splitlines()
        rec = json.loads(lines[1])
        del rec["mel"]
        lines[1] = json.dumps(rec)
        manifest.write_text("\n".join(lines))
        with pytest.raises(FormatError, match="'mel'"):
            read_manifest(manifest)

    def test_missing_sidecar(self, manifest):
        self.edit_record(manifest, 1, mel="mels/nowhere.melb")
        with pytest.raises(FormatError, match="missing file"):
            read_manifest(manifest)

    def test_bad_durations(self, manifest, tmp_path):
        write_durations(tmp_path / "durations" / "bad.dur", [1, 1])
        self.edit_record(manifest, 1, gt_durations="durations/bad.dur")
        with pytest.raises(InvariantError, match="gt_durations"):
            read_manifest(manifest)

    def test_phoneme_out_of_inventory(self, manifest):
        self.edit_record(manifest, 2, phonemes=[99])
        with pytest.raises(InvariantError):
            read_manifest(manifest)

    def test_invalid_json(self, manifest):
        manifest.write_text(manifest.read_text() + "{oops\n")
        with pytest.raises(FormatError, match="JSON"):
            read_manifest(manifest)

    def test_header_required(self, manifest):
        lines = manifest.read_text().splitlines()
        manifest.write_text("\n".join(lines[1:]))
        with pytest.raises(FormatError, match="header"):
            read_manifest(manifest)


class TestCheckpoint:
    """PSYN0001 container with parameters, optimizer state and history."""

    @pytest.fixture
    def trained(self, small_corpus, tiny_config):
        return stage1_train(small_corpus, tiny_config(), steps=5)

    def test_bytes_round_trip_bit_exact(self, trained):
        raw = checkpoint_bytes(trained)
        assert raw[:8] == MAGIC
        back = checkpoint_from_bytes(raw)
        assert checkpoint_bytes(back) == raw
        assert back.step == trained.step and back.history == trained.history
        assert back.config == trained.config and back.model.stage == trained.model.stage

    def test_same_forward_outputs(self, trained, tmp_path):
        save_checkpoint(tmp_path / "c.psyn", trained)
        back = load_checkpoint(tmp_path / "c.psyn")
        ids = [1, 2, 3, 4]
        a, _, da = encoder_forward(trained.model, ids)
        b, _, db = encoder_forward(back.model, ids)
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(da.data, db.data)

    def test_optimizer_state_kept(self, trained):
        back = checkpoint_from_bytes(checkpoint_bytes(trained))
        assert back.optimizer.t == trained.optimizer.t
        for key, m in trained.optimizer.m.items():
            assert m.tobytes() == back.optimizer.m[key].tobytes()

    def test_bad_magic(self, trained):
        raw = checkpoint_bytes(trained)
        with pytest.raises(FormatError, match="bad magic"):
            checkpoint_from_bytes(b"XXXX0001" + raw[8:])

    def test_truncated(self, trained):
        raw = checkpoint_bytes(trained)
        with pytest.raises(FormatError, match="past the end"):
            checkpoint_from_bytes(raw[:-8])

    def test_trailing_bytes(self, trained):
        with pytest.raises(FormatError, match="trailing"):
            checkpoint_from_bytes(checkpoint_bytes(trained) + b"\0\0\0\0")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError, match="cannot read"):
            load_checkpoint(tmp_path / "none.psyn")
