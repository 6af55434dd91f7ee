import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uaretain.calib import (attention_match, attention_match_summary, auroc, calibration_report,
                            confidence_and_correct, ece, reliability_bins, write_reliability_csv)


def brute_auroc(scores, labels):
    """O(N^2) pair count; ties worth one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


class TestReliabilityBins:
    def test_all_confident_and_correct(self):
        bins = reliability_bins([1.0] * 5, [True] * 5)
        assert bins.count.tolist() == [0] * 9 + [5]
        assert bins.accuracy[-1] == 1.0

    def test_empty(self):
        bins = reliability_bins([], [], n_bins=4)
        assert bins.count.tolist() == [0, 0, 0, 0]
        assert bins.n == 0

    def test_hand_binning(self):
        bins = reliability_bins([0.6, 0.6, 0.9, 0.9], [1, 1, 1, 0], n_bins=2, lo=0.5, hi=1.0)
        assert bins.count.tolist() == [2, 2]
        np.testing.assert_allclose(bins.mean_confidence, [0.6, 0.9], rtol=1e-15)
        assert bins.accuracy.tolist() == [1.0, 0.5]

    def test_edges_are_left_closed(self):
        bins = reliability_bins([0.0, 0.1, 0.7, 1.0], [1, 1, 1, 1], n_bins=10)
        assert bins.count[[0, 1, 7, 9]].tolist() == [1, 1, 1, 1]

    def test_bad_bin_count(self):
        with pytest.raises(ValueError):
            reliability_bins([0.5], [1], n_bins=0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.floats(0.0, 1.0), st.booleans()), max_size=60), st.integers(1, 20))
    def test_invariants(self, rows, n_bins):
        conf = [c for c, _ in rows]
        ok = [o for _, o in rows]
        bins = reliability_bins(conf, ok, n_bins)
        assert bins.n == len(rows)
        for i in np.flatnonzero(bins.count):
            assert bins.edges[i] <= bins.mean_confidence[i] <= bins.edges[i + 1]
            assert 0.0 <= bins.accuracy[i] <= 1.0


class TestEce:
    def test_perfect_bins(self):
        bins = reliability_bins([0.75] * 4, [1, 1, 1, 0], n_bins=10)
        assert ece(bins) == 0.0

    def test_hand_two_bin_example(self):
        bins = reliability_bins([0.6, 0.6, 0.9, 0.9], [1, 1, 1, 0], n_bins=2, lo=0.5, hi=1.0)
        assert abs(ece(bins) - 0.4) < 1e-12

    def test_same_example_on_unit_interval(self):
        bins = reliability_bins([0.6, 0.6, 0.9, 0.9], [1, 1, 1, 0], n_bins=10)
        assert abs(ece(bins) - 0.4) < 1e-12

    def test_calibrated_predictor(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(size=100_000)
        y = (rng.uniform(size=p.size) < p).astype(int)
        assert calibration_report(p, y, n_bins=10).ece < 0.01

    def test_zero_records(self):
        with pytest.raises(ValueError):
            ece(reliability_bins([], []))

    def test_single_bin_is_plain_gap(self):
        bins = reliability_bins([0.8, 0.85, 0.82], [1, 0, 0], n_bins=1)
        assert ece(bins) == abs(1 / 3 - np.mean([0.8, 0.85, 0.82]))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        conf = rng.uniform(0.5, 1.0, size=40)
        ok = rng.integers(0, 2, size=40)
        perm = rng.permutation(40)
        a = ece(reliability_bins(conf, ok))
        b = ece(reliability_bins(conf[perm], ok[perm]))
        assert a == pytest.approx(b, abs=1e-15)
        assert 0.0 <= a <= 1.0


class TestConfidence:
    def test_binary_convention(self):
        conf, ok = confidence_and_correct([0.2, 0.5, 0.9], [0, 0, 0])
        np.testing.assert_allclose(conf, [0.8, 0.5, 0.9])
        assert ok.tolist() == [True, False, False]


class TestAuroc:
    def test_perfect(self):
        assert auroc([0.9, 0.1], [1, 0]) == 1.0

    def test_all_ties(self):
        assert auroc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    def test_single_class(self):
        with pytest.raises(ValueError):
            auroc([0.1, 0.2], [1, 1])

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_pair_counting(self, seed):
        rng = np.random.default_rng(seed)
        scores = np.round(rng.uniform(size=200), 2)  # rounding forces ties
        labels = rng.integers(0, 2, size=200)
        assert abs(auroc(scores, labels) - brute_auroc(scores, labels)) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.normal(size=50)
        labels = np.r_[0, 1, rng.integers(0, 2, size=48)]
        assert auroc(np.exp(scores) * 3 + 1, labels) == pytest.approx(auroc(scores, labels), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_negation_complements(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.normal(size=30)
        labels = np.r_[0, 1, rng.integers(0, 2, size=28)]
        assert abs(auroc(scores, labels) + auroc(-scores, labels) - 1.0) < 1e-12


class TestAttentionMatch:
    def test_exact_selection(self):
        truth = np.array([[True, False], [False, True]])
        assert attention_match(truth * 0.5, truth) == (1.0, 1.0)

    def test_complement(self):
        truth = np.array([[True, False], [False, True]])
        assert attention_match(~truth * 0.5, truth) == (0.0, 0.0)

    def test_hand_case(self):
        # cells a, b, c, d: relevant {a}, selected {a, b}
        contrib = np.array([[0.5, -0.2], [0.001, 0.0]])
        truth = np.array([[True, False], [False, False]])
        sens, spec = attention_match(contrib, truth)
        assert sens == 1.0
        assert spec == pytest.approx(2 / 3)

    def test_hand_case_three_cells(self):
        contrib = np.array([0.5, -0.2, 0.001])
        truth = np.array([True, False, False])
        assert attention_match(contrib, truth) == (1.0, 0.5)

    def test_threshold_is_inclusive(self):
        assert attention_match(np.array([0.01, 0.0]), np.array([True, False])) == (1.0, 1.0)

    @pytest.mark.parametrize("truth", [[True, True], [False, False]])
    def test_degenerate_truth(self, truth):
        with pytest.raises(ValueError):
            attention_match(np.array([0.1, 0.2]), np.array(truth))

    def test_summary_micro_and_macro(self):
        c1, t1 = np.array([1.0, 0.0, 0.0]), np.array([True, True, False])
        c2, t2 = np.array([1.0, 1.0, 1.0, 0.0]), np.array([True, False, False, False])
        s = attention_match_summary([c1, c2], [t1, t2])
        assert s["micro_sensitivity"] == pytest.approx(2 / 3)
        assert s["macro_sensitivity"] == pytest.approx(0.75)
        assert s["micro_specificity"] == pytest.approx(2 / 4)
        assert s["macro_specificity"] == pytest.approx((1.0 + 1 / 3) / 2)


def test_reliability_csv(tmp_path):
    bins = reliability_bins([0.6, 0.9], [1, 0], n_bins=2, lo=0.5, hi=1.0)
    write_reliability_csv(bins, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "bin_lo,bin_hi,count,mean_confidence,accuracy"
    assert lines[1] == "0.5,0.75,1,0.6,1.0"
    assert len(lines) == 3
