"""Classification metrics on Monte Carlo predictive distributions.

Entropies are in nats. Calibration bins are right-closed intervals
``(b/B, (b+1)/B]`` with confidence 0 assigned to the first bin, so every
record falls in exactly one bin.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class PredictionRecord:
    probs: np.ndarray
    label: int | None = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"not a probability vector: {probs}")
        object.__setattr__(self, "probs", probs)

    @property
    def confidence(self) -> float:
        return float(self.probs.max())

    @property
    def predicted(self) -> int:
        # np.argmax returns the first maximum, i.e. ties go to the lowest class
        return int(np.argmax(self.probs)) + 1

    @property
    def correct(self) -> bool | None:
        return None if self.label is None else self.predicted == self.label


def records_from_probs(probs, labels=None) -> list[PredictionRecord]:
    probs = np.atleast_2d(probs)
    if labels is None:
        return [PredictionRecord(p) for p in probs]
    return [PredictionRecord(p, int(y)) for p, y in zip(probs, labels)]


def _require(records, labeled: bool = True):
    if not records:
        raise ValueError("metrics need at least one record")
    if labeled and any(r.label is None for r in records):
        raise ValueError("every record needs a label")


def accuracy(records) -> float:
    _require(records)
    return sum(r.correct for r in records) / len(records)


def nll(records) -> float:
    _require(records)
    return -sum(math.log(max(r.probs[r.label - 1], PROB_FLOOR)) for r in records) / len(records)


def mean_confidence(records) -> float:
    _require(records, labeled=False)
    return float(np.mean([r.confidence for r in records]))


def bin_index(confidence, n_bins: int):
    """Bin of each confidence under the ``(b/B, (b+1)/B]`` convention."""
    c = np.asarray(confidence, dtype=float)
    return np.clip(np.ceil(c * n_bins).astype(int) - 1, 0, n_bins - 1)


@dataclass(frozen=True)
class BinStats:
    index: int
    lo: float
    hi: float
    count: int
    accuracy: float
    confidence: float

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def calibration_bins(records, n_bins: int = 15) -> list[BinStats]:
    _require(records)
    if n_bins < 1:
        raise ValueError("need at least one bin")
    conf = np.array([r.confidence for r in records])
    correct = np.array([r.correct for r in records], dtype=float)
    which = bin_index(conf, n_bins)
    out = []
    for b in range(n_bins):
        mask = which == b
        k = int(mask.sum())
        out.append(BinStats(
            b + 1, b / n_bins, (b + 1) / n_bins, k,
            float(correct[mask].mean()) if k else math.nan,
            float(conf[mask].mean()) if k else math.nan,
        ))
    return out


def ece(records, n_bins: int = 15) -> float:
    bins = calibration_bins(records, n_bins)
    p = len(records)
    return float(sum(b.count / p * abs(b.accuracy - b.confidence) for b in bins if b.count))


def predictive_entropy(probs) -> float:
    probs = np.asarray(probs, dtype=float)
    nz = probs[probs > 0]
    return float(-np.sum(nz * np.log(nz)))


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def entropy_histogram(records, bin_count: int = 20) -> Histogram:
    """Equal-width histogram of predictive entropies over ``[0, log n_l]``."""
    if bin_count < 1:
        raise ValueError("need at least one bin")
    if not records:
        raise ValueError("histogram needs at least one record")
    n_l = records[0].probs.size
    top = math.log(n_l)
    edges = np.linspace(0.0, top, bin_count + 1)
    ent = np.array([predictive_entropy(r.probs) for r in records])
    which = np.clip(np.floor(ent / top * bin_count).astype(int), 0, bin_count - 1)
    return Histogram(edges, np.bincount(which, minlength=bin_count))


def summary(records, n_bins: int = 15) -> dict:
    """Metrics JSON payload."""
    return {
        "accuracy": accuracy(records),
        "nll": nll(records),
        "ece": ece(records, n_bins),
        "mean_confidence": mean_confidence(records),
        "n_records": len(records),
        "bins": [b.to_dict() for b in calibration_bins(records, n_bins)],
    }
