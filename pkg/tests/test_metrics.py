"""Calibration metric contracts against naive loop/binning oracles."""

import numpy as np
import pytest

from fedsi.errors import EmptyRecords
from fedsi.metrics import accuracy, brier, ece, mce, reliability_bins


def naive_binning(probs, labels, bins):
    """Independent per-record loop; same edge convention as the library."""
    stats = [dict(count=0, conf=0.0, hits=0.0) for _ in range(bins)]
    for p, y in zip(probs, labels):
        conf = max(p)
        b = min(int(conf * bins), bins - 1)
        stats[b]["count"] += 1
        stats[b]["conf"] += conf
        stats[b]["hits"] += 1.0 if int(np.argmax(p)) == y else 0.0
    return stats


def naive_ece(probs, labels, bins):
    stats = naive_binning(probs, labels, bins)
    n = len(labels)
    total = 0.0
    for s in stats:
        if s["count"]:
            total += (s["count"] / n) * abs(s["hits"] / s["count"] - s["conf"] / s["count"])
    return total


def naive_mce(probs, labels, bins):
    stats = naive_binning(probs, labels, bins)
    gaps = [abs(s["hits"] / s["count"] - s["conf"] / s["count"])
            for s in stats if s["count"]]
    return max(gaps) if gaps else 0.0


def random_records(rng, n, classes):
    raw = rng.uniform(0.05, 1.0, size=(n, classes))
    probs = raw / raw.sum(axis=1, keepdims=True)
    labels = rng.integers(0, classes, size=n)
    return probs, labels


class TestAccuracy:
    def test_all_correct(self):
        probs = np.array([[0.9, 0.1], [0.2, 0.8]])
        assert accuracy(probs, np.array([0, 1])) == 1.0

    def test_half_correct(self):
        probs = np.array([[0.9, 0.1], [0.9, 0.1]])
        assert accuracy(probs, np.array([0, 1])) == 0.5

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        probs, labels = random_records(rng, 200, 5)
        expected = sum(int(np.argmax(p)) == y for p, y in zip(probs, labels)) / 200
        assert accuracy(probs, labels) == pytest.approx(expected)

    def test_empty_rejected(self):
        with pytest.raises(EmptyRecords):
            accuracy(np.zeros((0, 3)), np.zeros(0, dtype=int))


class TestEce:
    def test_confident_and_correct_is_calibrated(self):
        probs = np.tile([1.0, 0.0], (5, 1))
        assert ece(probs, np.zeros(5, dtype=int), bins=10) == 0.0

    def test_single_bin_arithmetic(self):
        # All confidence 0.8, half correct: |0.5 - 0.8| = 0.3.
        probs = np.tile([0.8, 0.2], (4, 1))
        labels = np.array([0, 0, 1, 1])
        assert ece(probs, labels, bins=1) == pytest.approx(0.3)

    def test_matches_binning_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            probs, labels = random_records(rng, 300, 4)
            assert ece(probs, labels, 15) == pytest.approx(
                naive_ece(probs, labels, 15), abs=1e-12)


class TestMce:
    def test_zero_for_perfect(self):
        probs = np.tile([1.0, 0.0], (3, 1))
        assert mce(probs, np.zeros(3, dtype=int), bins=5) == 0.0

    def test_takes_worst_bin(self):
        # Bin |0.55-..|: two records at conf 0.55 with 1 hit -> gap 0.05;
        # two at conf 0.95 with 1 hit -> gap 0.45.
        probs = np.array([[0.55, 0.45], [0.55, 0.45], [0.95, 0.05], [0.95, 0.05]])
        labels = np.array([0, 1, 0, 1])
        assert mce(probs, labels, bins=10) == pytest.approx(0.45)

    def test_matches_binning_oracle(self):
        rng = np.random.default_rng(2)
        probs, labels = random_records(rng, 400, 3)
        assert mce(probs, labels, 15) == pytest.approx(
            naive_mce(probs, labels, 15), abs=1e-12)

    def test_ece_bounded_by_mce(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            probs, labels = random_records(rng, 100, 6)
            e, m = ece(probs, labels, 12), mce(probs, labels, 12)
            assert 0.0 <= e <= m <= 1.0


class TestBrier:
    def test_perfect_predictions(self):
        probs = np.eye(3)[np.array([0, 1, 2])]
        assert brier(probs, np.array([0, 1, 2])) == 0.0

    def test_uniform_ten_classes(self):
        probs = np.full((4, 10), 0.1)
        assert brier(probs, np.arange(4)) == pytest.approx(0.9)

    @pytest.mark.parametrize("classes", [2, 10])
    def test_uniform_predictor_identity(self, classes):
        probs = np.full((6, classes), 1.0 / classes)
        labels = np.arange(6) % classes
        assert brier(probs, labels) == pytest.approx(1.0 - 1.0 / classes)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        probs, labels = random_records(rng, 150, 4)
        expected = np.mean([
            sum((p[o] - (1.0 if o == y else 0.0)) ** 2 for o in range(4))
            for p, y in zip(probs, labels)])
        assert brier(probs, labels) == pytest.approx(expected, abs=1e-12)

    def test_range(self):
        probs = np.array([[0.0, 1.0]])
        assert brier(probs, np.array([0])) == pytest.approx(2.0)


class TestReliability:
    def test_single_record_lands_in_its_bin(self):
        probs = np.array([[0.7, 0.3]])
        rb = reliability_bins(probs, np.array([0]), bins=10)
        assert rb.counts[7] == 1 and rb.counts.sum() == 1
        assert rb.mean_confidence[7] == pytest.approx(0.7)
        assert rb.accuracy[7] == 1.0

    def test_counts_sum_to_records(self):
        rng = np.random.default_rng(5)
        probs, labels = random_records(rng, 321, 5)
        rb = reliability_bins(probs, labels, bins=15)
        assert rb.counts.sum() == 321

    def test_matches_binning_oracle(self):
        rng = np.random.default_rng(6)
        probs, labels = random_records(rng, 250, 3)
        rb = reliability_bins(probs, labels, bins=12)
        stats = naive_binning(probs, labels, 12)
        for b, s in enumerate(stats):
            assert rb.counts[b] == s["count"]
            if s["count"]:
                assert rb.mean_confidence[b] == pytest.approx(s["conf"] / s["count"])
                assert rb.accuracy[b] == pytest.approx(s["hits"] / s["count"])

    def test_csv_has_row_per_bin(self):
        probs = np.array([[0.6, 0.4], [0.9, 0.1]])
        text = reliability_bins(probs, np.array([0, 0]), bins=5).to_csv()
        lines = text.strip().splitlines()
        assert lines[0] == "bin_lo,bin_hi,count,mean_conf,accuracy"
        assert len(lines) == 6


def test_permutation_invariance():
    rng = np.random.default_rng(7)
    probs, labels = random_records(rng, 120, 4)
    perm = rng.permutation(120)
    assert ece(probs, labels, 15) == pytest.approx(ece(probs[perm], labels[perm], 15))
    assert mce(probs, labels, 15) == pytest.approx(mce(probs[perm], labels[perm], 15))
    assert brier(probs, labels) == pytest.approx(brier(probs[perm], labels[perm]))
    assert accuracy(probs, labels) == pytest.approx(accuracy(probs[perm], labels[perm]))
