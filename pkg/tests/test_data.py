"""IDX parsing, label-skew partitioning, subset protocol, synthetic corpus."""

import struct

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from fedsi.data import (
    IDX_IMAGE_MAGIC,
    IDX_LABEL_MAGIC,
    LabeledSet,
    parse_idx_images,
    parse_idx_labels,
    partition_label_skew,
    subset_protocol,
    synthetic_mixture,
    write_idx_images,
    write_idx_labels,
)
from fedsi.errors import BadMagic, DimensionOverflow, InsufficientExamples, TruncatedPayload


class TestIdxParsing:
    def test_labels_decode(self):
        payload = struct.pack(">2i", IDX_LABEL_MAGIC, 2) + bytes([7, 3])
        np.testing.assert_array_equal(parse_idx_labels(payload), [7, 3])

    def test_bad_magic(self):
        payload = struct.pack(">2i", 0x12345678, 2) + bytes([1, 2])
        with pytest.raises(BadMagic):
            parse_idx_labels(payload)
        with pytest.raises(BadMagic):
            parse_idx_images(struct.pack(">4i", 0x12345678, 1, 2, 2) + bytes(4))

    def test_truncated_payload(self):
        header = struct.pack(">4i", IDX_IMAGE_MAGIC, 10, 2, 2)
        with pytest.raises(TruncatedPayload):
            parse_idx_images(header + bytes(5 * 4))  # 5 of 10 declared images

    def test_truncated_header(self):
        with pytest.raises(TruncatedPayload):
            parse_idx_labels(struct.pack(">i", IDX_LABEL_MAGIC))

    def test_negative_dimension(self):
        payload = struct.pack(">4i", IDX_IMAGE_MAGIC, -1, 28, 28)
        with pytest.raises(DimensionOverflow):
            parse_idx_images(payload)

    def test_pixel_scaling(self):
        payload = struct.pack(">4i", IDX_IMAGE_MAGIC, 1, 1, 2) + bytes([0, 255])
        np.testing.assert_array_equal(parse_idx_images(payload), [[0.0, 1.0]])

    def test_roundtrip_is_pixel_exact(self):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(7, 12), dtype=np.uint8)
        features = pixels.astype(np.float64) / 255.0
        blob = write_idx_images(features, rows=3, cols=4)
        np.testing.assert_array_equal(parse_idx_images(blob), features)
        labels = rng.integers(0, 10, size=7)
        np.testing.assert_array_equal(
            parse_idx_labels(write_idx_labels(labels)), labels)


def tiny_corpus(per_class_train=12, per_class_test=6, classes=4, dim=3, seed=0):
    rng = np.random.default_rng(seed)

    def make(per_class):
        features = rng.normal(size=(per_class * classes, dim))
        labels = np.repeat(np.arange(classes), per_class)
        return LabeledSet(features, labels)

    return make(per_class_train), make(per_class_test)


class TestPartition:
    def test_single_client_holds_everything(self):
        train, test = tiny_corpus()
        fed = partition_label_skew(train, test, n_clients=1, labels_per_client=4, seed=1)
        assert fed.n_clients == 1
        assert len(fed.clients[0].train) == len(train)
        assert sorted(fed.assigned_labels[0]) == [0, 1, 2, 3]

    def test_each_client_sees_exactly_its_labels(self):
        train, test = tiny_corpus(classes=10, per_class_train=20, per_class_test=10)
        fed = partition_label_skew(train, test, n_clients=10, labels_per_client=5, seed=3)
        for i, split in enumerate(fed.clients):
            observed = sorted(set(split.train.labels) | set(split.test.labels))
            assert observed == fed.assigned_labels[i]
            assert len(fed.assigned_labels[i]) == 5

    def test_union_is_disjoint_and_complete(self):
        train, test = tiny_corpus(classes=5, per_class_train=13)
        fed = partition_label_skew(train, test, n_clients=5, labels_per_client=2, seed=9)
        rows = np.concatenate([c.train.features for c in fed.clients])
        assert rows.shape[0] == len(train)
        # Row multiset equality: sort both by a stable key.
        key = np.lexsort(rows.T)
        key_ref = np.lexsort(train.features.T)
        np.testing.assert_array_equal(rows[key], train.features[key_ref])

    def test_balanced_holders(self):
        train, test = tiny_corpus(classes=10, per_class_train=20, per_class_test=10)
        fed = partition_label_skew(train, test, n_clients=10, labels_per_client=5, seed=5)
        holders = {label: 0 for label in range(10)}
        for labels in fed.assigned_labels:
            for label in labels:
                holders[label] += 1
        assert set(holders.values()) == {5}

    def test_same_seed_reproduces_manifest(self):
        train, test = tiny_corpus()
        a = partition_label_skew(train, test, 2, 2, seed=11)
        b = partition_label_skew(train, test, 2, 2, seed=11)
        assert a.manifest_json() == b.manifest_json()
        for ca, cb in zip(a.clients, b.clients):
            np.testing.assert_array_equal(ca.train.features, cb.train.features)

    def test_insufficient_examples(self):
        train, test = tiny_corpus(per_class_train=1, classes=4)
        with pytest.raises(InsufficientExamples):
            partition_label_skew(train, test, n_clients=4, labels_per_client=2, seed=0)


class TestSubsetProtocol:
    def _corpus(self):
        return tiny_corpus(per_class_train=80, per_class_test=1000, classes=10, dim=4)

    def test_small_counts(self):
        train, test = self._corpus()
        sub_train, sub_test = subset_protocol(train, test, "small", "mnist", seed=0)
        assert len(sub_train) == 500 and len(sub_test) == 9500
        for label in range(10):
            assert (sub_train.labels == label).sum() == 50
            assert (sub_test.labels == label).sum() == 950

    def test_large_counts_need_more_data(self):
        train, test = self._corpus()
        with pytest.raises(InsufficientExamples):
            subset_protocol(train, test, "large", "mnist", seed=0)

    def test_large_counts(self):
        train, test = tiny_corpus(per_class_train=1000, per_class_test=400,
                                  classes=10, dim=2)
        sub_train, sub_test = subset_protocol(train, test, "large", "fmnist", seed=2)
        assert len(sub_train) == 9000 and len(sub_test) == 3000

    def test_no_train_test_overlap(self):
        train, test = self._corpus()
        sub_train, sub_test = subset_protocol(train, test, "small", "mnist", seed=1)
        train_rows = {row.tobytes() for row in sub_train.features}
        assert all(row.tobytes() not in train_rows for row in sub_test.features)

    def test_unknown_protocol(self):
        train, test = self._corpus()
        with pytest.raises(ValueError):
            subset_protocol(train, test, "small", "cifar10", seed=0)


class TestSyntheticMixture:
    def test_linear_oracle_separates_wide_blobs(self):
        train, test = synthetic_mixture(n_classes=2, dim=2, per_class=200,
                                        separation=10.0, seed=4)
        clf = LogisticRegression(max_iter=1000).fit(train.features, train.labels)
        assert clf.score(test.features, test.labels) > 0.99

    def test_linear_oracle_many_classes(self):
        train, test = synthetic_mixture(n_classes=6, dim=16, per_class=100,
                                        separation=8.0, seed=4)
        clf = LogisticRegression(max_iter=1000).fit(train.features, train.labels)
        assert clf.score(test.features, test.labels) > 0.99

    def test_empty_when_no_examples(self):
        train, test = synthetic_mixture(4, 3, per_class=0, separation=1.0, seed=0)
        assert len(train) == 0 and len(test) == 0

    def test_deterministic(self):
        a = synthetic_mixture(3, 5, 50, 2.0, seed=8)
        b = synthetic_mixture(3, 5, 50, 2.0, seed=8)
        np.testing.assert_array_equal(a[0].features, b[0].features)
        np.testing.assert_array_equal(a[1].labels, b[1].labels)

    def test_split_ratio(self):
        train, test = synthetic_mixture(2, 3, per_class=10, separation=1.0, seed=0)
        assert len(train) == 16 and len(test) == 4
