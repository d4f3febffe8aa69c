"""Dataset ingestion, heterogeneous partitioning, and synthetic corpora.

Feature matrices are float64 with one row per example; labels are int64
class ids.  All randomized construction is driven by explicit seeds and
is reproducible bit-for-bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    DimensionOverflow,
    InsufficientExamples,
    TruncatedPayload,
)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# Per-class (train, test) counts for the published small/large protocols.
SUBSET_COUNTS = {
    ("mnist", "small"): (50, 950),
    ("mnist", "large"): (900, 300),
    ("fmnist", "small"): (50, 950),
    ("fmnist", "large"): (900, 300),
}

_MAX_IDX_ELEMENTS = 1 << 33  # caps count*rows*cols to keep allocations sane


@dataclass(frozen=True)
class LabeledSet:
    """Feature rows paired with integer class labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise DimensionMismatch("features must be (n, d), labels  (n,)")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DimensionMismatch("features and labels disagree on example count")

    def __len__(self) -> int:
        return self.features.shape[0]

    def take(self, idx: np.ndarray) -> "LabeledSet":
        return LabeledSet(self.features[idx], self.labels[idx])

    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


@dataclass(frozen=True)
class ClientSplit:
    train: LabeledSet
    test: LabeledSet


@dataclass(frozen=True)
class FederatedDataset:
    """Per-client splits plus the manifest describing how they were made."""

    clients: list[ClientSplit]
    assigned_labels: list[list[int]]
    seed: int
    num_classes: int = field(default=0)

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "clients": [
                {
                    "id": i,
                    "labels": list(map(int, self.assigned_labels[i])),
                    "train_count": len(split.train),
                    "test_count": len(split.test),
                }
                for i, split in enumerate(self.clients)
            ],
        }

    def manifest_json(self) -> str:
        return json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n"


def _read_header(payload: bytes, words: int) -> tuple[int, ...]:
    need = 4 * words
    if len(payload) < need:
        raise TruncatedPayload(f"header needs {need} bytes, payload has {len(payload)}")
    return struct.unpack(f">{words}i", payload[:need])


def parse_idx_images(payload: bytes) -> np.ndarray:
    """Decode an IDX image blob into float64 rows scaled to [0, 1]."""
    magic, count, rows, cols = _read_header(payload, 4)
    if magic != IDX_IMAGE_MAGIC:
        raise BadMagic(f"expected image magic {IDX_IMAGE_MAGIC:#010x}, got {magic:#010x}")
    for name, value in (("count", count), ("rows", rows), ("cols", cols)):
        if value < 0:
            raise DimensionOverflow(f"negative {name} in IDX header: {value}")
    if count * rows * cols > _MAX_IDX_ELEMENTS:
        raise DimensionOverflow(f"IDX declares {count}x{rows}x{cols} elements")
    body = payload[16:]
    expected = count * rows * cols
    if len(body) < expected:
        raise TruncatedPayload(f"payload holds {len(body)} pixels, header declares {expected}")
    pixels = np.frombuffer(body[:expected], dtype=np.uint8)
    return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0


def parse_idx_labels(payload: bytes) -> np.ndarray:
    """Decode an IDX label blob into int64 class ids."""
    magic, count = _read_header(payload, 2)
    if magic != IDX_LABEL_MAGIC:
        raise BadMagic(f"expected label magic {IDX_LABEL_MAGIC:#010x}, got {magic:#010x}")
    if count < 0:
        raise DimensionOverflow(f"negative count in IDX header: {count}")
    body = payload[8:]
    if len(body) < count:
        raise TruncatedPayload(f"payload holds {len(body)} labels, header declares {count}")
    return np.frombuffer(body[:count], dtype=np.uint8).astype(np.int64)


def write_idx_images(features: np.ndarray, rows: int, cols: int) -> bytes:
    """Encode [0, 1]-scaled feature rows as an IDX image blob."""
    features = np.asarray(features)
    if features.shape[1] != rows * cols:
        raise DimensionMismatch(f"feature width {features.shape[1]} != {rows}x{cols}")
    header = struct.pack(">4i", IDX_IMAGE_MAGIC, features.shape[0], rows, cols)
    pixels = np.clip(np.rint(features * 255.0), 0, 255).astype(np.uint8)
    return header + pixels.tobytes()


def write_idx_labels(labels: np.ndarray) -> bytes:
    header = struct.pack(">2i", IDX_LABEL_MAGIC, len(labels))
    return header + np.asarray(labels, dtype=np.uint8).tobytes()


def load_idx_pair(image_path, label_path) -> LabeledSet:
    with open(image_path, "rb") as f:
        features = parse_idx_images(f.read())
    with open(label_path, "rb") as f:
        labels = parse_idx_labels(f.read())
    if features.shape[0] != labels.shape[0]:
        raise DimensionMismatch(
            f"{features.shape[0]} images but {labels.shape[0]} labels")
    return LabeledSet(features, labels)


def _deal_labels(n_clients: int, labels_per_client: int, num_classes: int,
                 rng: np.random.Generator) -> list[list[int]]:
    """Assign distinct labels to clients so every label has equal holders.

    Shuffled copies of the label set are dealt one at a time to the
    eligible client (lacking the label, still short of its quota) with the
    fewest labels so far; ties go to the lowest client id.
    """
    total = n_clients * labels_per_client
    assigned: list[list[int]] = [[] for _ in range(n_clients)]
    held: list[set[int]] = [set() for _ in range(n_clients)]
    dealt = 0
    while dealt < total:
        progressed = False
        for label in rng.permutation(num_classes):
            if dealt == total:
                break
            label = int(label)
            candidates = [c for c in range(n_clients)
                          if label not in held[c] and len(assigned[c]) < labels_per_client]
            if not candidates:
                continue
            target = min(candidates, key=lambda c: (len(assigned[c]), c))
            assigned[target].append(label)
            held[target].add(label)
            dealt += 1
            progressed = True
        if not progressed:
            raise ValueError("label assignment deadlocked; adjust client/label counts")
    return [sorted(labels) for labels in assigned]


def _split_among_holders(examples: np.ndarray, holders: list[int],
                         rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Shuffle one label's example indices and split them evenly over holders."""
    perm = rng.permutation(examples)
    chunks = np.array_split(perm, len(holders))
    return {holder: chunk for holder, chunk in zip(sorted(holders), chunks)}


def partition_label_skew(train: LabeledSet, test: LabeledSet, n_clients: int,
                         labels_per_client: int, seed: int) -> FederatedDataset:
    """Label-skew partition: each client sees a fixed subset of the classes.

    Every label is held by the same number of clients and its examples are
    divided evenly (remainders spread to the earliest holders).  Both
    splits are partitioned with the same assignment.
    """
    num_classes = max(train.num_classes(), test.num_classes())
    if labels_per_client > num_classes:
        raise ValueError(f"labels_per_client {labels_per_client} exceeds "
                         f"{num_classes} classes")
    rng = np.random.default_rng(seed)
    assigned = _deal_labels(n_clients, labels_per_client, num_classes, rng)
    holders: dict[int, list[int]] = {label: [] for label in range(num_classes)}
    for client, labels in enumerate(assigned):
        for label in labels:
            holders[label].append(client)

    client_train = [list() for _ in range(n_clients)]
    client_test = [list() for _ in range(n_clients)]
    for label in range(num_classes):
        if not holders[label]:
            continue
        train_idx = np.flatnonzero(train.labels == label)
        test_idx = np.flatnonzero(test.labels == label)
        if train_idx.size < len(holders[label]):
            raise InsufficientExamples(
                f"label {label} has {train_idx.size} training examples for "
                f"{len(holders[label])} holders")
        for client, chunk in _split_among_holders(train_idx, holders[label], rng).items():
            client_train[client].append(chunk)
        for client, chunk in _split_among_holders(test_idx, holders[label], rng).items():
            client_test[client].append(chunk)

    clients = []
    for i in range(n_clients):
        tr = np.sort(np.concatenate(client_train[i])) if client_train[i] else np.zeros(0, dtype=np.int64)
        te = np.sort(np.concatenate(client_test[i])) if client_test[i] else np.zeros(0, dtype=np.int64)
        clients.append(ClientSplit(train=train.take(tr), test=test.take(te)))
    return FederatedDataset(clients=clients, assigned_labels=assigned, seed=seed,
                            num_classes=num_classes)


def subset_protocol(train: LabeledSet, test: LabeledSet, size: str, kind: str,
                    seed: int) -> tuple[LabeledSet, LabeledSet]:
    """Draw the per-class small/large subsets from the full corpus."""
    key = (kind.lower(), size.lower())
    if key not in SUBSET_COUNTS:
        raise ValueError(f"no subset protocol for kind={kind!r}, size={size!r}")
    per_train, per_test = SUBSET_COUNTS[key]
    rng = np.random.default_rng(seed)
    return (_per_class_sample(train, per_train, rng, "train"),
            _per_class_sample(test, per_test, rng, "test"))


def _per_class_sample(data: LabeledSet, per_class: int, rng: np.random.Generator,
                      split_name: str) -> LabeledSet:
    picks = []
    for label in range(data.num_classes()):
        idx = np.flatnonzero(data.labels == label)
        if idx.size < per_class:
            raise InsufficientExamples(
                f"class {label} has {idx.size} {split_name} examples, need {per_class}")
        picks.append(np.sort(rng.choice(idx, size=per_class, replace=False)))
    order = np.sort(np.concatenate(picks))
    return data.take(order)


def synthetic_mixture(n_classes: int, dim: int, per_class: int, separation: float,
                      seed: int) -> tuple[LabeledSet, LabeledSet]:
    """Gaussian blobs with unit covariance around seeded direction vectors.

    Class means are `separation` times random unit vectors; when the class
    count fits the dimension the directions are orthonormalized so no two
    classes collide by chance.  Each class contributes `per_class` examples
    split 80/20 into train/test.
    """
    if separation <= 0.0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(n_classes, dim))
    if n_classes <= dim:
        q, _ = np.linalg.qr(directions.T)
        directions = q.T[:n_classes]
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions / np.maximum(norms, 1e-12)

    train_x, train_y, test_x, test_y = [], [], [], []
    for label in range(n_classes):
        points = means[label] + rng.normal(size=(per_class, dim))
        n_train = int(0.8 * per_class)
        train_x.append(points[:n_train])
        train_y.append(np.full(n_train, label, dtype=np.int64))
        test_x.append(points[n_train:])
        test_y.append(np.full(per_class - n_train, label, dtype=np.int64))
    train = LabeledSet(np.concatenate(train_x) if train_x else np.zeros((0, dim)),
                       np.concatenate(train_y) if train_y else np.zeros(0, dtype=np.int64))
    test = LabeledSet(np.concatenate(test_x) if test_x else np.zeros((0, dim)),
                      np.concatenate(test_y) if test_y else np.zeros(0, dtype=np.int64))
    return train, test
