"""Rater calibration and validator-benchmarking statistics.

Human ratings arrive as (triplet, rater, axis, value) rows on two axes,
instruction adherence and aesthetics. Each rater's systematic offset is
estimated as the difference between their personal mean and the mean
consensus of exactly the triplets they rated; the per-triplet consensus is
the mean of the offset-corrected ratings. Biases are estimated per axis in a
single pass from raw scores, with no iterative re-estimation.

The remaining functions benchmark a candidate validator against consensus
truth: MAE, Spearman rank correlation, per-bucket MAE, bucketed confusion
matrices, and binary classification metrics at an operating threshold.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np


class Axis(str, Enum):
    INSTRUCTION = "instruction"
    AESTHETICS = "aesthetics"


# High-resolution buckets at the top of the scale, where selection operates.
DEFAULT_BUCKET_EDGES = (1.0, 2.0, 3.0, 4.0, 4.5, 4.7, 5.0)


@dataclass(frozen=True)
class RaterScore:
    triplet_id: str
    rater_id: str
    axis: Axis
    value: float


@dataclass(frozen=True)
class RaterBias:
    rater_id: str
    axis: Axis
    bias: float


@dataclass(frozen=True)
class TripletConsensus:
    triplet_id: str
    axis: Axis
    score: float


def _axis_scores(scores: Iterable[RaterScore], axis: Axis) -> list[RaterScore]:
    out = []
    seen: set[tuple[str, str]] = set()
    for s in scores:
        if s.axis != axis:
            continue
        key = (s.triplet_id, s.rater_id)
        if key in seen:
            raise ValueError(f"duplicate score for triplet {s.triplet_id!r} by rater {s.rater_id!r}")
        seen.add(key)
        out.append(s)
    return out


def rater_bias(scores: Iterable[RaterScore], axis: Axis) -> list[RaterBias]:
    """Per-rater offset: own mean minus the mean triplet-consensus of their set.

    The triplet consensus used as reference is the plain mean over all raters
    of that triplet, the rater included.
    """
    rows = _axis_scores(scores, axis)
    if not rows:
        raise ValueError(f"no scores on axis {axis.value}")
    by_triplet: dict[str, list[float]] = defaultdict(list)
    by_rater: dict[str, list[RaterScore]] = defaultdict(list)
    for s in rows:
        by_triplet[s.triplet_id].append(s.value)
        by_rater[s.rater_id].append(s)
    triplet_mean = {t: float(np.mean(v)) for t, v in by_triplet.items()}

    biases = []
    for rater_id in sorted(by_rater):
        own = by_rater[rater_id]
        own_mean = float(np.mean([s.value for s in own]))
        reference = float(np.mean([triplet_mean[s.triplet_id] for s in own]))
        biases.append(RaterBias(rater_id=rater_id, axis=axis, bias=own_mean - reference))
    return biases


def consensus(
    scores: Iterable[RaterScore], biases: Iterable[RaterBias], axis: Axis
) -> list[TripletConsensus]:
    """Per-triplet mean of bias-corrected ratings."""
    rows = _axis_scores(scores, axis)
    bias_by_rater = {b.rater_id: b.bias for b in biases if b.axis == axis}
    by_triplet: dict[str, list[float]] = defaultdict(list)
    for s in rows:
        try:
            corrected = s.value - bias_by_rater[s.rater_id]
        except KeyError:
            raise ValueError(f"no bias available for rater {s.rater_id!r} on axis {axis.value}") from None
        by_triplet[s.triplet_id].append(corrected)
    return [
        TripletConsensus(triplet_id=t, axis=axis, score=float(np.mean(v)))
        for t, v in sorted(by_triplet.items())
    ]


def calibrate_axis(scores: Iterable[RaterScore], axis: Axis) -> tuple[list[RaterBias], list[TripletConsensus]]:
    """Convenience wrapper: biases then consensus from the same score set."""
    rows = list(scores)
    biases = rater_bias(rows, axis)
    return biases, consensus(rows, biases, axis)


def mae(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Mean absolute error."""
    p = np.asarray(pred, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape or p.ndim != 1 or p.size == 0:
        raise ValueError("pred and truth must be equal-length non-empty vectors")
    return float(np.mean(np.abs(p - t)))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=float)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Spearman rank correlation: Pearson correlation of average-rank vectors."""
    p = np.asarray(pred, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape or p.ndim != 1 or p.size < 2:
        raise ValueError("pred and truth must be equal-length vectors of length >= 2")
    rp = _average_ranks(p)
    rt = _average_ranks(t)
    rp = rp - rp.mean()
    rt = rt - rt.mean()
    denom = np.sqrt((rp * rp).sum() * (rt * rt).sum())
    if denom == 0.0:
        return float("nan")  # a constant vector has no defined rank correlation
    return float((rp * rt).sum() / denom)


def inter_rater_reliability(
    scores: Iterable[RaterScore], axis: Axis, min_shared: int = 2
) -> tuple[float, float, int]:
    """Mean and std of pairwise Spearman over raters sharing enough triplets.

    Pairs sharing fewer than ``min_shared`` triplets are skipped. Returns
    (mean, population std, pair count).
    """
    rows = _axis_scores(scores, axis)
    by_rater: dict[str, dict[str, float]] = defaultdict(dict)
    for s in rows:
        by_rater[s.rater_id][s.triplet_id] = s.value
    raters = sorted(by_rater)
    rhos = []
    for i in range(len(raters)):
        for j in range(i + 1, len(raters)):
            a, b = by_rater[raters[i]], by_rater[raters[j]]
            shared = sorted(set(a) & set(b))
            if len(shared) < min_shared:
                continue
            rho = spearman([a[t] for t in shared], [b[t] for t in shared])
            if not np.isnan(rho):
                rhos.append(rho)
    if not rhos:
        raise ValueError("no rater pair shares enough triplets on this axis")
    arr = np.asarray(rhos)
    return float(arr.mean()), float(arr.std()), len(rhos)


def _bucket_index(value: float, edges: Sequence[float]) -> int:
    """Index of the half-open bucket [e_i, e_{i+1}); the last bucket closes at the top."""
    if value < edges[0] or value > edges[-1]:
        raise ValueError(f"value {value} outside bucket range [{edges[0]}, {edges[-1]}]")
    for i in range(len(edges) - 2):
        if value < edges[i + 1]:
            return i
    return len(edges) - 2


def bucket_labels(edges: Sequence[float]) -> list[str]:
    half_open = [f"[{edges[i]:g}-{edges[i + 1]:g})" for i in range(len(edges) - 2)]
    return half_open + [f"[{edges[-2]:g}-{edges[-1]:g}]"]


def bucketed_mae(
    pred: Sequence[float], truth: Sequence[float], bucket_edges: Sequence[float] = DEFAULT_BUCKET_EDGES
) -> dict[str, float | None]:
    """MAE restricted to each ground-truth bucket; None for empty buckets."""
    p = np.asarray(pred, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape:
        raise ValueError("pred and truth must have equal length")
    labels = bucket_labels(bucket_edges)
    sums = [0.0] * len(labels)
    counts = [0] * len(labels)
    for pv, tv in zip(p, t):
        idx = _bucket_index(tv, bucket_edges)
        sums[idx] += abs(pv - tv)
        counts[idx] += 1
    return {
        label: (sums[i] / counts[i] if counts[i] else None) for i, label in enumerate(labels)
    }


def confusion_matrix(
    pred: Sequence[float], truth: Sequence[float], bucket_edges: Sequence[float] = DEFAULT_BUCKET_EDGES
) -> np.ndarray:
    """Counts indexed [truth bucket, predicted bucket]."""
    p = np.asarray(pred, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape:
        raise ValueError("pred and truth must have equal length")
    n = len(bucket_edges) - 1
    matrix = np.zeros((n, n), dtype=int)
    for pv, tv in zip(p, t):
        matrix[_bucket_index(tv, bucket_edges), _bucket_index(pv, bucket_edges)] += 1
    return matrix


@dataclass(frozen=True)
class ClassificationMetrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    tp: int
    fp: int
    fn: int
    tn: int
    precision_undefined: bool = False

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "precision_undefined": self.precision_undefined,
        }


def classification_metrics(
    pred_pairs: Sequence[tuple[float, float]],
    truth_pairs: Sequence[tuple[float, float]],
    operating_threshold: float = 4.7,
    positive_baseline: float = 4.0,
) -> ClassificationMetrics:
    """Binary metrics for success detection at an operating threshold.

    A prediction is positive when both predicted scores are >= the threshold;
    the truth is positive when both human scores are strictly above the
    baseline. Undefined precision (no predicted positives) is reported as 0
    with an explicit flag so sweeps stay plottable.
    """
    if len(pred_pairs) != len(truth_pairs) or not pred_pairs:
        raise ValueError("pred_pairs and truth_pairs must be equal-length and non-empty")
    tp = fp = fn = tn = 0
    for (pa, pb), (ta, tb) in zip(pred_pairs, truth_pairs):
        predicted = pa >= operating_threshold and pb >= operating_threshold
        actual = ta > positive_baseline and tb > positive_baseline
        if predicted and actual:
            tp += 1
        elif predicted:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    undefined = (tp + fp) == 0
    precision = 0.0 if undefined else tp / (tp + fp)
    recall = 0.0 if (tp + fn) == 0 else tp / (tp + fn)
    f1 = 0.0 if (precision + recall) == 0 else 2 * precision * recall / (precision + recall)
    accuracy = (tp + tn) / len(pred_pairs)
    return ClassificationMetrics(precision, recall, f1, accuracy, tp, fp, fn, tn, undefined)


def pr_sweep(
    pred_pairs: Sequence[tuple[float, float]],
    truth_pairs: Sequence[tuple[float, float]],
    thresholds: Sequence[float],
    positive_baseline: float = 4.0,
) -> list[tuple[float, float, float]]:
    """(threshold, precision, recall) at each candidate operating threshold."""
    out = []
    for th in thresholds:
        m = classification_metrics(pred_pairs, truth_pairs, th, positive_baseline)
        out.append((float(th), m.precision, m.recall))
    return out
