"""Forward-sum loss, Viterbi durations and the length regulator."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prosody_tts import tensor as tn
from prosody_tts.alignment import (
    Alignment,
    EmissionStats,
    durations_from_predictor,
    emission_log_likelihood,
    forward_sum_loss,
    length_regulator,
    pooling_matrix,
    viterbi,
    viterbi_durations,
)
from prosody_tts.errors import InfeasibleAlignmentError, InvariantError
from prosody_tts.gradcheck import check_gradients
from prosody_tts.tensor import Tape, Tensor
from prosody_tts.verify import brute_force_alignment, reference_emissions


def random_instance(rng, m, n, d=3):
    return rng.standard_normal((m, d)), rng.uniform(-1.0, 1.0, (m, d)), rng.standard_normal((n, d))


def loss64(means, log_vars, mel, normalize=False):
    with tn.precision(np.float64):
        return float(forward_sum_loss(EmissionStats(Tensor(means), Tensor(log_vars)), mel, normalize).data)


class TestAlignmentType:
    """Durations contract."""

    def test_valid(self):
        a = Alignment([2, 1, 3])
        assert a.frames == 6 and len(a) == 3

    def test_zero_duration_rejected(self):
        with pytest.raises(InvariantError):
            Alignment([2, 0])

    def test_check_against_counts(self):
        with pytest.raises(InvariantError):
            Alignment([2, 2]).check(2, 5)


class TestForwardSum:
    """Log-sum over monotonic segmentations."""

    def test_single_phoneme(self, rng):
        means, log_vars, mel = random_instance(rng, 1, 5)
        e = reference_emissions(means, log_vars, mel)
        np.testing.assert_allclose(loss64(means, log_vars, mel), -e.sum(), atol=1e-9)

    def test_diagonal(self, rng):
        means, log_vars, mel = random_instance(rng, 4, 4)
        e = reference_emissions(means, log_vars, mel)
        np.testing.assert_allclose(loss64(means, log_vars, mel), -np.trace(e), atol=1e-9)

    def test_two_by_three(self, rng):
        means, log_vars, mel = random_instance(rng, 2, 3)
        e = reference_emissions(means, log_vars, mel)
        paths = [e[0, 0] + e[1:, 1].sum(), e[:2, 0].sum() + e[2, 1]]
        np.testing.assert_allclose(loss64(means, log_vars, mel), -np.logaddexp(*paths), atol=1e-9)

    @given(st.integers(1, 6), st.data())
    @settings(max_examples=60, deadline=None)
    def test_matches_enumeration(self, n, data):
        m = data.draw(st.integers(1, n))
        rng = np.random.default_rng(data.draw(st.integers(0, 2**31 - 1)))
        means, log_vars, mel = random_instance(rng, m, n)
        ref_sum, _ = brute_force_alignment(reference_emissions(means, log_vars, mel))
        assert abs(-loss64(means, log_vars, mel) - ref_sum) < 1e-4

    def test_normalized_by_frames(self, rng):
        means, log_vars, mel = random_instance(rng, 3, 7)
        np.testing.assert_allclose(loss64(means, log_vars, mel, True), loss64(means, log_vars, mel) / 7)

    def test_infeasible(self, rng):
        means, log_vars, mel = random_instance(rng, 4, 3)
        with pytest.raises(InfeasibleAlignmentError):
            loss64(means, log_vars, mel)

    def test_permutation_sensitive(self, rng):
        means, log_vars, mel = random_instance(rng, 4, 9)
        perm = [2, 0, 3, 1]
        assert loss64(means, log_vars, mel) != pytest.approx(loss64(means[perm], log_vars[perm], mel))

    def test_gradients(self, rng):
        means, log_vars, mel = random_instance(rng, 3, 7)
        with tn.precision(np.float64):
            f = lambda x: forward_sum_loss(EmissionStats(x, Tensor(log_vars)), mel)
            assert check_gradients(f, Tensor(means), dtype=np.float64) < 1e-3

    def test_emission_matches_reference(self, rng):
        means, log_vars, mel = random_instance(rng, 3, 5)
        with tn.precision(np.float64):
            e = emission_log_likelihood(EmissionStats(Tensor(means), Tensor(log_vars)), mel).data
        np.testing.assert_allclose(e, reference_emissions(means, log_vars, mel), atol=1e-10)


class TestViterbi:
    """Best single segmentation."""

    def test_single_phoneme(self, rng):
        d, _ = viterbi(rng.standard_normal((6, 1)))
        np.testing.assert_array_equal(d, [6])

    def test_recovers_two_segments(self):
        means = np.array([[2.0, 0.0], [-2.0, 1.0]])
        mel = np.concatenate([np.tile(means[0], (4, 1)), np.tile(means[1], (5, 1))])
        stats = EmissionStats(Tensor(means), Tensor(np.zeros((2, 2))))
        np.testing.assert_array_equal(viterbi_durations(stats, mel).durations, [4, 5])

    def test_ties_favour_earlier_phonemes(self):
        d, _ = viterbi(np.zeros((5, 2)))
        np.testing.assert_array_equal(d, [4, 1])

    @given(st.integers(1, 6), st.data())
    @settings(max_examples=60, deadline=None)
    def test_valid_and_optimal(self, n, data):
        m = data.draw(st.integers(1, n))
        rng = np.random.default_rng(data.draw(st.integers(0, 2**31 - 1)))
        e = reference_emissions(*random_instance(rng, m, n))
        d, logp = viterbi(e)
        assert d.size == m and d.sum() == n and (d >= 1).all()
        ref_sum, ref_max = brute_force_alignment(e)
        assert logp <= ref_sum + 1e-9
        assert abs(logp - ref_max) < 1e-9

    def test_infeasible(self):
        with pytest.raises(InfeasibleAlignmentError):
            viterbi(np.zeros((2, 3)))


class TestLengthRegulator:
    """Row repetition by duration."""

    def test_identity(self, rng):
        x = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(length_regulator(Tensor(x), [1, 1, 1, 1]).data, x.astype(np.float32))

    def test_repetition(self):
        out = length_regulator(Tensor([[1.0], [2.0], [3.0]]), [2, 1, 3]).data[:, 0]
        np.testing.assert_array_equal(out, [1, 1, 2, 3, 3, 3])

    def test_gradient_sums_copies(self, rng):
        x = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        w = rng.standard_normal((6, 2))
        with Tape() as tape:
            loss = tn.sum_(tn.mul(length_regulator(x, [2, 1, 3]), w))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [w[:2].sum(0), w[2], w[3:].sum(0)], rtol=1e-6)

    @given(st.lists(st.integers(1, 4), min_size=1, max_size=6), st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_linear(self, durations, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((2, len(durations), 3))
        lhs = length_regulator(Tensor(a + b), durations).data
        rhs = length_regulator(Tensor(a), durations).data + length_regulator(Tensor(b), durations).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_count_mismatch(self):
        with pytest.raises(InvariantError):
            length_regulator(Tensor(np.ones((2, 1))), [1, 1, 1])

    def test_pooling_is_segment_mean(self, rng):
        mel = rng.standard_normal((5, 2))
        np.testing.assert_allclose(pooling_matrix([2, 3]) @ mel, [mel[:2].mean(0), mel[2:].mean(0)], rtol=1e-6)


class TestDurationsFromPredictor:
    """Rounding predicted log durations."""

    def test_zero_logs(self):
        np.testing.assert_array_equal(durations_from_predictor([0.0, 0.0]).durations, [1, 1])

    def test_round_down(self):
        np.testing.assert_array_equal(durations_from_predictor([np.log(3.4)]).durations, [3])

    def test_half_even(self):
        np.testing.assert_array_equal(durations_from_predictor(np.log([2.5, 3.5])).durations, [2, 4])

    def test_clamped_at_one(self):
        np.testing.assert_array_equal(durations_from_predictor([-5.0]).durations, [1])

    def test_scale_stretches(self, rng):
        log_d = rng.uniform(np.log(3), np.log(12), 400)
        base = durations_from_predictor(log_d).frames
        stretched = durations_from_predictor(log_d, 1.5).frames
        assert abs(stretched / base - 1.5) < 0.02
