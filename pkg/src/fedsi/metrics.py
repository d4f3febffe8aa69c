"""Accuracy and calibration metrics over predicted probability vectors.

A record set is a pair (probs, labels): probs has one probability row per
example, labels the true class ids.  Confidence is the maximum class
probability; bins are equal-width on [0, 1] with the top edge closed.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyRecords

DEFAULT_BINS = 15


@dataclass(frozen=True)
class ReliabilityBins:
    """Per-bin confidence/accuracy statistics for a reliability diagram."""

    edges: np.ndarray        # (bins + 1,) increasing, spanning [0, 1]
    counts: np.ndarray       # (bins,) examples per bin
    mean_confidence: np.ndarray  # (bins,) 0 for empty bins
    accuracy: np.ndarray     # (bins,) 0 for empty bins

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("bin_lo,bin_hi,count,mean_conf,accuracy\n")
        for b in range(self.counts.size):
            out.write(f"{self.edges[b]:.6f},{self.edges[b + 1]:.6f},"
                      f"{self.counts[b]},{self.mean_confidence[b]:.17g},"
                      f"{self.accuracy[b]:.17g}\n")
        return out.getvalue()


def _check_records(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2:
        raise DimensionMismatch("probs must be (n, classes)")
    if probs.shape[0] != labels.shape[0]:
        raise DimensionMismatch("probs and labels disagree on record count")
    if probs.shape[0] == 0:
        raise EmptyRecords("metric requested over zero records")
    return probs, labels


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of records whose argmax class (ties to lowest id) is correct."""
    probs, labels = _check_records(probs, labels)
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def _bin_index(confidence: np.ndarray, bins: int) -> np.ndarray:
    # Equal-width bins [i/bins, (i+1)/bins); confidence 1.0 lands in the last.
    return np.minimum((confidence * bins).astype(np.int64), bins - 1)


def reliability_bins(probs: np.ndarray, labels: np.ndarray,
                     bins: int = DEFAULT_BINS) -> ReliabilityBins:
    """Bin records by confidence and report per-bin counts/confidence/accuracy."""
    probs, labels = _check_records(probs, labels)
    if bins < 1:
        raise ValueError("bins must be >= 1")
    confidence = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    which = _bin_index(confidence, bins)
    counts = np.bincount(which, minlength=bins)
    conf_sum = np.bincount(which, weights=confidence, minlength=bins)
    hit_sum = np.bincount(which, weights=correct, minlength=bins)
    nonzero = np.maximum(counts, 1)
    return ReliabilityBins(
        edges=np.linspace(0.0, 1.0, bins + 1),
        counts=counts,
        mean_confidence=np.where(counts > 0, conf_sum / nonzero, 0.0),
        accuracy=np.where(counts > 0, hit_sum / nonzero, 0.0),
    )


def ece(probs: np.ndarray, labels: np.ndarray, bins: int = DEFAULT_BINS) -> float:
    """Count-weighted mean |accuracy - confidence| over nonempty bins."""
    rb = reliability_bins(probs, labels, bins)
    n = rb.counts.sum()
    gaps = np.abs(rb.accuracy - rb.mean_confidence)
    return float(np.sum((rb.counts / n) * gaps))


def mce(probs: np.ndarray, labels: np.ndarray, bins: int = DEFAULT_BINS) -> float:
    """Largest |accuracy - confidence| over nonempty bins."""
    rb = reliability_bins(probs, labels, bins)
    occupied = rb.counts > 0
    gaps = np.abs(rb.accuracy[occupied] - rb.mean_confidence[occupied])
    return float(gaps.max()) if gaps.size else 0.0


def brier(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean squared distance between probability rows and one-hot labels."""
    probs, labels = _check_records(probs, labels)
    onehot = np.zeros_like(probs)
    onehot[np.arange(probs.shape[0]), labels] = 1.0
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


def summarize(probs: np.ndarray, labels: np.ndarray,
              bins: int = DEFAULT_BINS) -> dict[str, float]:
    """All four scalar metrics in one pass-friendly dict."""
    return {
        "accuracy": accuracy(probs, labels),
        "ece": ece(probs, labels, bins),
        "mce": mce(probs, labels, bins),
        "brier": brier(probs, labels),
    }
