import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ordiff import corpus, ordering
from ordiff.errors import BTooLarge, EmptyVocab, NoWindows, WindowLengthMismatch


def destruction_ids(spec):
    return [m.tolist() for m in spec.destruction_order()]


class TestFrequencyOrder:
    def test_common_first_generation_destroys_rare_first(self):
        # common-first generation == rare-first destruction
        spec = ordering.order_frequency(np.array([0.5, 0.3, 0.2]), "rare_first")
        assert destruction_ids(spec) == [[2], [1], [0]]

    def test_tie_break_ascending_id(self):
        spec = ordering.order_frequency(np.array([0.25, 0.25, 0.5]), "common_first")
        assert destruction_ids(spec) == [[2], [0], [1]]

    def test_reversal_when_distinct(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = rng.dirichlet(np.ones(6)) + 1e-3
            p /= p.sum()
            a = np.concatenate(ordering.order_frequency(p, "common_first").destruction_order())
            b = np.concatenate(ordering.order_frequency(p, "rare_first").destruction_order())
            np.testing.assert_array_equal(a, b[::-1])

    def test_zero_probability_goes_first(self):
        p = np.array([0.6, 0.0, 0.4])
        for direction in ("common_first", "rare_first"):
            order = np.concatenate(ordering.order_frequency(p, direction).destruction_order())
            assert order[0] == 1

    def test_empty_rejected(self):
        with pytest.raises(EmptyVocab):
            ordering.order_frequency(np.array([]), "common_first")


class TestRandomOrder:
    def test_single_category(self):
        assert destruction_ids(ordering.order_random(1, 0)) == [[0]]

    def test_deterministic(self):
        a = ordering.order_random(8, 42).group_of
        b = ordering.order_random(8, 42).group_of
        np.testing.assert_array_equal(a, b)

    def test_uniform_over_permutations(self):
        # chi-square over all 3! permutations at 1e5 seeds
        counts = {}
        for seed in range(10**5):
            key = tuple(ordering.order_random(3, seed).group_of.tolist())
            counts[key] = counts.get(key, 0) + 1
        assert len(counts) == 6
        expected = 10**5 / 6
        chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
        # 5 dof; P(chi2 > 20.5) ~ 1e-3
        assert chi2 < 20.5


class TestExplicitOrder:
    def test_partition_enforced(self):
        with pytest.raises(ValueError):
            ordering.order_explicit([[0, 1], [1]], 3)
        with pytest.raises(ValueError):
            ordering.order_explicit([[0]], 2)

    def test_roundtrip_file(self, tmp_path):
        spec = ordering.order_explicit([[2], [0, 1]], 3)
        path = tmp_path / "order.txt"
        ordering.save_ordering(spec, path)
        loaded = ordering.load_ordering(path)
        np.testing.assert_array_equal(loaded.group_of, spec.group_of)
        assert loaded.num_groups == spec.num_groups


def make_windows(rows):
    return [np.asarray(r) for r in rows]


class TestInformationGain:
    def test_all_present_scores_zero(self):
        vocab = corpus.build_char_vocab("ab")
        windows = make_windows([[0, 1]] * 10 + [[1, 0]] * 10)
        rep = ordering.information_gain(windows, vocab)
        np.testing.assert_allclose(rep.scores, 0.0, atol=1e-12)
        np.testing.assert_allclose(rep.presence, 1.0)

    def test_half_aa_half_bb(self):
        # observing either category pins the window -> score log 2 for both
        vocab = corpus.build_char_vocab("ab")
        windows = make_windows([[0, 0]] * 50 + [[1, 1]] * 50)
        rep = ordering.information_gain(windows, vocab)
        np.testing.assert_allclose(rep.scores, math.log(2.0), atol=1e-12)

    def test_scores_nonnegative_random(self):
        rng = np.random.default_rng(0)
        vocab = corpus.toy_vocab()
        windows = make_windows(rng.integers(0, 6, size=(500, 4)))
        rep = ordering.information_gain(windows, vocab)
        assert np.all(rep.scores >= -1e-12)

    def test_invariant_to_order_and_duplication(self):
        vocab = corpus.build_char_vocab("abc")
        rows = [[0, 1, 2], [0, 0, 1], [2, 2, 2], [1, 1, 0]]
        a = ordering.information_gain(make_windows(rows), vocab).scores
        b = ordering.information_gain(make_windows(rows[::-1]), vocab).scores
        c = ordering.information_gain(make_windows(rows + rows), vocab).scores
        np.testing.assert_allclose(a, b, atol=1e-12)
        np.testing.assert_allclose(a, c, atol=1e-12)

    def test_toy_anchor_scores(self):
        # Observing anchors pins fills, so a and b clearly beat c and d.
        # 'e' is as informative as 'a' by complementarity (in anchor-aligned
        # windows "e present" and "a absent" are the same event), so no claim
        # is made about it relative to the anchors.
        rng = np.random.default_rng(5)
        block = corpus.generate_toy_corpus(4000, 31, rng)
        windows = corpus.window_iter(block, 3, 3)
        rep = ordering.information_gain(windows, corpus.toy_vocab())
        assert min(rep.scores[0], rep.scores[1]) > max(rep.scores[2], rep.scores[3])
        assert rep.scores[5] == 0.0  # never present
        assert rep.presence[5] == 0.0

    def test_errors(self):
        vocab = corpus.build_char_vocab("ab")
        with pytest.raises(NoWindows):
            ordering.information_gain([], vocab)
        with pytest.raises(WindowLengthMismatch):
            ordering.information_gain(make_windows([[0, 1], [0, 1, 1]]), vocab)


class TestIGOrder:
    def test_all_zero_ties_by_id(self):
        rep = ordering.IGReport(scores=np.zeros(4), window_len=2, presence=np.ones(4))
        assert destruction_ids(ordering.order_information_gain(rep, "high_first")) == [[0], [1], [2], [3]]

    def test_direction(self):
        rep = ordering.IGReport(scores=np.array([0.1, 0.9]), window_len=2, presence=np.ones(2))
        assert destruction_ids(ordering.order_information_gain(rep, "high_first")) == [[1], [0]]
        assert destruction_ids(ordering.order_information_gain(rep, "low_first")) == [[0], [1]]


class TestBlocks:
    def test_single_block(self):
        spec = ordering.make_blocks(np.array([0.5, 0.5]), 1, 1.0)
        assert spec.num_groups == 1
        assert sorted(destruction_ids(spec)[0]) == [0, 1]

    def test_uniform_four_two_blocks(self):
        spec = ordering.make_blocks(np.full(4, 0.25), 2, 1.0)
        sizes = sorted(len(m) for m in spec.destruction_order())
        assert sizes == [2, 2]

    def test_b_equals_v_matches_frequency(self):
        rng = np.random.default_rng(1)
        for direction in ("common_first", "rare_first"):
            p = rng.dirichlet(np.arange(1.0, 6.0))
            blocks = ordering.make_blocks(p, p.size, 1.0, direction)
            freq = ordering.order_frequency(p, direction)
            np.testing.assert_array_equal(blocks.group_of, freq.group_of)

    def test_alpha_changes_split(self):
        p = np.array([0.4, 0.25, 0.15, 0.1, 0.06, 0.04])
        low = ordering.make_blocks(p, 2, 0.5, "rare_first")
        high = ordering.make_blocks(p, 2, 1.0, "rare_first")
        assert not np.array_equal(low.group_of, high.group_of)

    def test_b_too_large(self):
        with pytest.raises(BTooLarge):
            ordering.make_blocks(np.array([0.5, 0.5, 0.0]), 3, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10**6))
def test_partition_property(num_categories, seed):
    # every category lands in exactly one group, all groups nonempty
    spec = ordering.order_random(num_categories, seed)
    members = np.concatenate(spec.destruction_order())
    assert sorted(members.tolist()) == list(range(num_categories))
