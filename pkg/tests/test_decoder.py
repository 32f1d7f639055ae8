import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blankskip.ctc import greedy_decode
from blankskip.decoder import (
    DecodeOptions,
    beam_hypotheses,
    corpus_ter,
    edit_distance,
    prefix_beam_search,
    token_error_rate,
)

import oracles


def _best_by_enumeration(lp):
    probs = oracles.sequence_probs(lp)
    return min(probs.items(), key=lambda kv: (-kv[1], kv[0]))


class TestPrefixBeamSearch:
    def test_single_frame(self):
        lp = np.log([[0.6, 0.4]])
        (best, logp), = prefix_beam_search(lp, DecodeOptions(beam_width=2))
        assert best == () and math.exp(logp) == pytest.approx(0.6, abs=1e-12)

    def test_two_frames_merge(self):
        lp = np.log([[0.4, 0.6], [0.4, 0.6]])
        ranked = prefix_beam_search(lp, DecodeOptions(beam_width=4, nbest=2))
        assert ranked[0][0] == (1,)
        # alignments (a, blank), (blank, a), (a, a)
        assert math.exp(ranked[0][1]) == pytest.approx(0.24 + 0.24 + 0.36, abs=1e-12)

    def test_repeat_needs_blank(self):
        lp = np.log([[0.4, 0.6], [0.4, 0.6]])
        beam = {h.prefix: h.log_prob for h in beam_hypotheses(lp, DecodeOptions(beam_width=10))}
        assert (1, 1) not in beam
        probs = oracles.sequence_probs(lp)
        assert probs.get((1, 1), 0.0) == 0.0

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            prefix_beam_search(np.zeros((0, 3)))

    def test_options_validation(self):
        with pytest.raises(ValueError):
            DecodeOptions(beam_width=2, nbest=3)
        with pytest.raises(ValueError):
            DecodeOptions(tau_decode=0.0)
        with pytest.raises(ValueError):
            DecodeOptions(skip_update="drop")

    @pytest.mark.parametrize("seed", range(10))
    def test_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        lp = oracles.random_log_probs(rng, 4, 3, scale=1.5)
        (prefix, logp), = prefix_beam_search(lp, DecodeOptions(beam_width=40))
        best, p = _best_by_enumeration(lp)
        assert prefix == best
        assert logp == pytest.approx(math.log(p), abs=1e-9)

    def test_full_beam_probabilities_exact(self, rng):
        lp = oracles.random_log_probs(rng, 4, 3)
        probs = oracles.sequence_probs(lp)
        beam = beam_hypotheses(lp, DecodeOptions(beam_width=64))
        for h in beam:
            assert math.exp(h.log_prob) == pytest.approx(probs.get(h.prefix, 0.0), abs=1e-12)

    def test_probability_conserved_each_frame(self, rng):
        lp = oracles.random_log_probs(rng, 5, 3)
        for t in range(1, 6):
            beam = beam_hypotheses(lp[:t], DecodeOptions(beam_width=200))
            assert sum(math.exp(h.log_prob) for h in beam) <= 1 + 1e-9

    def test_prefixes_unique(self, rng):
        lp = oracles.random_log_probs(rng, 8, 4)
        prefixes = [h.prefix for h in beam_hypotheses(lp, DecodeOptions(beam_width=8))]
        assert len(prefixes) == len(set(prefixes)) == 8

    def test_tie_break_lexicographic(self):
        lp = np.log([[1 / 3, 1 / 3, 1 / 3]])
        ranked = prefix_beam_search(lp, DecodeOptions(beam_width=3, nbest=3))
        assert [p for p, _ in ranked] == [(), (1,), (2,)]

    def test_deterministic(self, rng):
        lp = oracles.random_log_probs(rng, 12, 5)
        opts = DecodeOptions(beam_width=4, nbest=4)
        assert prefix_beam_search(lp, opts) == prefix_beam_search(lp, opts)

    def test_beam_one_matches_greedy_on_spiky_grids(self):
        for seed in range(20):
            lp = oracles.spiky_log_probs(np.random.default_rng(seed), 15, 4)
            (best, _), = prefix_beam_search(lp, DecodeOptions(beam_width=1))
            assert best == greedy_decode(lp)


class TestFrameSkipping:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 12))
    def test_tau_one_bit_identical(self, seed, frames):
        lp = oracles.random_log_probs(np.random.default_rng(seed), frames, 4, scale=4)
        opts = DecodeOptions(beam_width=4, tau_decode=1.0, nbest=4)
        assert prefix_beam_search(lp, opts) == prefix_beam_search(lp, opts, frame_skipping=False)

    def test_certain_blank_frames_behave_like_blank(self, rng):
        # a frame with blank probability exactly 1 is the limit the skip update mirrors
        lp = oracles.random_log_probs(rng, 6, 3)
        lp[2] = np.log([1.0, 1e-300, 1e-300])
        opts = DecodeOptions(beam_width=20, tau_decode=0.999, nbest=5)
        skipped = prefix_beam_search(lp, opts)
        plain = prefix_beam_search(lp, opts, frame_skipping=False)
        assert [p for p, _ in skipped] == [p for p, _ in plain]
        np.testing.assert_allclose([v for _, v in skipped], [v for _, v in plain], atol=1e-12)

    def test_unskipped_frames_processed_identically(self, rng):
        lp = oracles.spiky_log_probs(rng, 10, 4, peak=0.995)
        lp[0] = oracles.random_log_probs(rng, 1, 4)[0]
        opts = DecodeOptions(beam_width=6, tau_decode=0.99)
        # the first frame is below threshold in both runs
        one = beam_hypotheses(lp[:1], opts)
        two = beam_hypotheses(lp[:1], opts, frame_skipping=False)
        assert one == two

    def test_noop_ignores_skipped_frames(self, rng):
        lp = oracles.random_log_probs(rng, 5, 3)
        lp[2] = np.log([0.999, 0.0005, 0.0005])
        noop = prefix_beam_search(lp, DecodeOptions(beam_width=20, tau_decode=0.99, skip_update="noop", nbest=5))
        dropped = prefix_beam_search(np.delete(lp, 2, axis=0), DecodeOptions(beam_width=20, nbest=5))
        assert noop == dropped

    def test_blank_update_separates_repeats(self):
        # a skipped frame between two 'a' spikes acts as a blank, so 'a a' survives
        lp = np.log(np.array([[0.01, 0.99], [0.995, 0.005], [0.01, 0.99]]))
        blank = prefix_beam_search(lp, DecodeOptions(beam_width=4, tau_decode=0.99))[0][0]
        noop = prefix_beam_search(lp, DecodeOptions(beam_width=4, tau_decode=0.99, skip_update="noop"))[0][0]
        assert blank == (1, 1) and noop == (1,)


class TestEditDistance:
    def test_identical(self):
        assert edit_distance([1, 2, 3], [1, 2, 3]) == (0, 0, 0)

    def test_substitution(self):
        assert edit_distance([1, 2, 3], [1, 9, 3]) == (1, 0, 0)

    def test_insertions(self):
        assert edit_distance([1, 2], [1, 2, 3, 4]) == (0, 2, 0)

    def test_deletions(self):
        assert edit_distance([1, 2, 3], [2]) == (0, 0, 2)

    def test_empty_reference(self):
        assert token_error_rate([], [1, 2]) == 2.0

    @given(st.lists(st.integers(0, 3), max_size=8), st.lists(st.integers(0, 3), max_size=8))
    def test_total_matches_levenshtein(self, a, b):
        # plain unit-cost DP as the reference
        d = list(range(len(b) + 1))
        for i in range(1, len(a) + 1):
            prev, d[0] = d[0], i
            for j in range(1, len(b) + 1):
                cur = min(d[j] + 1, d[j - 1] + 1, prev + (a[i - 1] != b[j - 1]))
                prev, d[j] = d[j], cur
        assert sum(edit_distance(a, b)) == d[len(b)]

    def test_corpus_ter_pools_counts(self):
        assert corpus_ter([[1, 2], [3, 4, 5, 6]], [[1, 2], [3]]) == pytest.approx(3 / 6)
