"""Anomaly scores, threshold calibration, multilabel decisions, and metrics.

Scoring follows the two-pathway convention: each classifier output j gets
s_j = mu_j + var_j, except the normal channel which is inverted to
s_0 = 1 - mu_0 + var_0 so that larger always means more fault-like; the
decoding pathway scores an input by the mean squared error of its MC
predictive-mean reconstruction.  Thresholds are per-channel empirical
(1 - alpha)-quantiles of the scores on normal training data, so flagging
normal training data has false-positive rate about alpha.  Everything here
is a pure function over immutable inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .nncore import ensure_finite
from .uncertainty import McPrediction

MIN_CALIBRATION_EXAMPLES = 50


@dataclass
class AnomalyScores:
    """Per-channel classifier scores plus the optional reconstruction score."""

    clf: np.ndarray  # (n_classes,) with index 0 = normal channel
    rec: float | None = None


@dataclass
class ThresholdSet:
    clf_thresholds: np.ndarray | None
    rec_threshold: float | None
    alpha: float


@dataclass
class PredictionSet:
    b: np.ndarray  # boolean per-channel flags, index 0 = normal channel
    Y: set[int]  # {j : b_j}
    z: bool  # disjunction of all b_j


def _expand_two_class(mean: np.ndarray, variance: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """A single sigmoid output p becomes the pair ([1-p, p], [v, v])."""
    p, v = float(mean[0]), float(variance[0])
    return np.array([1.0 - p, p]), np.array([v, v])


def clf_anomaly_scores(mc: McPrediction) -> np.ndarray:
    """Score every classifier channel from MC mean and variance.

    s_j = mu_j + var_j for fault channels; the normal channel is inverted,
    s_0 = 1 - mu_0 + var_0.  A single sigmoid output is first expanded to its
    two-class form, which makes both entries equal by algebra.
    """
    mean = np.asarray(mc.mean, dtype=np.float64)
    variance = np.asarray(mc.variance, dtype=np.float64)
    if mean.shape != variance.shape or mean.ndim != 1:
        raise ValueError("mean and variance must be equal-length vectors")
    if mean.size == 1:
        mean, variance = _expand_two_class(mean, variance)
    scores = mean + variance
    scores[0] = 1.0 - mean[0] + variance[0]
    ensure_finite(scores, "anomaly scores")
    return scores


def clf_anomaly_scores_batch(mean: np.ndarray, variance: np.ndarray) -> np.ndarray:
    """Vectorized form over rows of MC batch statistics; returns (N, n+1)."""
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    if mean.shape != variance.shape or mean.ndim != 2:
        raise ValueError("mean and variance must be equal-shape matrices")
    if mean.shape[1] == 1:
        mean = np.hstack([1.0 - mean, mean])
        variance = np.hstack([variance, variance])
    scores = mean + variance
    scores[:, 0] = 1.0 - mean[:, 0] + variance[:, 0]
    ensure_finite(scores, "anomaly scores")
    return scores


def rec_anomaly_score(mu_rec: np.ndarray, x: np.ndarray) -> float:
    """Mean squared error between the predictive-mean reconstruction and x."""
    mu_rec = np.asarray(mu_rec, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if mu_rec.shape != x.shape:
        raise ValueError(f"shape mismatch: {mu_rec.shape} vs {x.shape}")
    return float(np.mean((mu_rec - x) ** 2))


def rec_anomaly_scores_batch(mu_rec: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-wise reconstruction scores; returns (N,)."""
    mu_rec = np.asarray(mu_rec, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if mu_rec.shape != x.shape or mu_rec.ndim != 2:
        raise ValueError(f"shape mismatch: {mu_rec.shape} vs {x.shape}")
    return np.mean((mu_rec - x) ** 2, axis=1)


def calibrate_thresholds(
    clf_scores: np.ndarray | None,
    alpha: float,
    rec_scores: np.ndarray | None = None,
) -> ThresholdSet:
    """Per-channel (1 - alpha) empirical quantiles of normal training scores.

    clf_scores is (N, channels); rec_scores is (N,).  Quantiles interpolate
    linearly between order statistics, so flagging the calibration data with
    strict > gives a false-positive rate of about alpha per channel.
    Requires at least 50 examples per supplied channel set.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if clf_scores is None and rec_scores is None:
        raise ValueError("need scores for at least one pathway")
    clf_thr = None
    if clf_scores is not None:
        clf_scores = np.asarray(clf_scores, dtype=np.float64)
        if clf_scores.ndim != 2:
            raise ValueError("clf_scores must be (N, channels)")
        if len(clf_scores) < MIN_CALIBRATION_EXAMPLES:
            raise ValueError(
                f"need at least {MIN_CALIBRATION_EXAMPLES} normal examples, got {len(clf_scores)}"
            )
        clf_thr = np.quantile(clf_scores, 1.0 - alpha, axis=0)
    rec_thr = None
    if rec_scores is not None:
        rec_scores = np.asarray(rec_scores, dtype=np.float64).reshape(-1)
        if len(rec_scores) < MIN_CALIBRATION_EXAMPLES:
            raise ValueError(
                f"need at least {MIN_CALIBRATION_EXAMPLES} normal examples, got {len(rec_scores)}"
            )
        rec_thr = float(np.quantile(rec_scores, 1.0 - alpha))
    return ThresholdSet(clf_thresholds=clf_thr, rec_threshold=rec_thr, alpha=alpha)


def predict_labels(scores: AnomalyScores, thresholds: ThresholdSet) -> PredictionSet:
    """Flag channel j iff s_j strictly exceeds its threshold.

    The label set Y collects flagged channels (the normal channel included)
    and the overall flag z is their disjunction.
    """
    if thresholds.clf_thresholds is None:
        raise ValueError("threshold set has no classifier thresholds")
    s = np.asarray(scores.clf, dtype=np.float64)
    thr = np.asarray(thresholds.clf_thresholds, dtype=np.float64)
    if s.shape != thr.shape:
        raise ValueError(f"score/threshold shape mismatch: {s.shape} vs {thr.shape}")
    b = s > thr
    return PredictionSet(b=b, Y={int(j) for j in np.nonzero(b)[0]}, z=bool(b.any()))


def predict_labels_batch(
    clf_scores: np.ndarray, thresholds: ThresholdSet
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized decision rule: returns (b matrix (N, n+1), z vector (N,))."""
    if thresholds.clf_thresholds is None:
        raise ValueError("threshold set has no classifier thresholds")
    s = np.asarray(clf_scores, dtype=np.float64)
    thr = np.asarray(thresholds.clf_thresholds, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != thr.shape[0]:
        raise ValueError(f"score/threshold shape mismatch: {s.shape} vs {thr.shape}")
    b = s > thr[None, :]
    return b, b.any(axis=1)


def diagnostic_accuracy(y_pred: set[int], y_true: int) -> float:
    """Credit for naming the true fault, diluted by extra fault labels.

    delta = 1{y in Y} / |Y intersect {1..n}|.  The normal label never
    discounts, so Y = {0, y} still scores 1.  Missing the true label scores
    0 outright, which also covers the empty-denominator case.  Undefined for
    normal examples (y = 0).
    """
    if y_true == 0:
        raise ValueError("diagnostic accuracy is defined for fault examples only")
    if y_true not in y_pred:
        return 0.0
    return 1.0 / sum(1 for j in y_pred if j >= 1)


def diagnostic_accuracies(b: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-example delta over fault rows of a flag matrix; NaN for y = 0."""
    b = np.asarray(b, dtype=bool)
    y = np.asarray(y, dtype=np.int64)
    out = np.full(len(y), np.nan)
    for i in range(len(y)):
        if y[i] != 0:
            out[i] = diagnostic_accuracy({int(j) for j in np.nonzero(b[i])[0]}, int(y[i]))
    return out


def binary_accuracy(flags: np.ndarray, groups, group: str) -> float:
    """Fraction of a group on the correct side of the flag.

    flags holds the per-example anomaly flag of either pathway (classifier z
    or rec score > threshold).  Normal examples are correct when unflagged,
    members of every other group when flagged.
    """
    flags = np.asarray(flags, dtype=bool)
    member = np.asarray([g == group for g in groups])
    if not member.any():
        raise ValueError(f"no examples in group {group!r}")
    if group == "normal":
        return float(np.mean(~flags[member]))
    return float(np.mean(flags[member]))


def group_binary_accuracies(flags: np.ndarray, groups) -> dict[str, float]:
    """binary_accuracy for every distinct group tag, insertion-ordered."""
    out: dict[str, float] = {}
    for g in groups:
        if g not in out:
            out[g] = binary_accuracy(flags, groups, g)
    return out


def precision_recall_at(
    scores: np.ndarray, fault_flags: np.ndarray, threshold: float
) -> tuple[float, float]:
    """Precision and recall of "score > threshold" as the fault predictor.

    With nothing flagged, precision is reported as 1.0 (no false positives).
    """
    scores = np.asarray(scores, dtype=np.float64)
    fault_flags = np.asarray(fault_flags, dtype=bool)
    pred = scores > threshold
    tp = int(np.sum(pred & fault_flags))
    fp = int(np.sum(pred & ~fault_flags))
    fn = int(np.sum(~pred & fault_flags))
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = tp / (tp + fn)
    return precision, recall


def precision_recall_sweep(
    scores: np.ndarray, fault_flags: np.ndarray, k: int = 50
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision/recall at k evenly spaced thresholds over the score range."""
    scores = np.asarray(scores, dtype=np.float64)
    fault_flags = np.asarray(fault_flags, dtype=bool)
    if len(scores) != len(fault_flags):
        raise ValueError("score/flag length mismatch")
    if not fault_flags.any() or fault_flags.all():
        raise ValueError("need at least one fault and one normal example")
    if k < 2:
        raise ValueError("need at least two thresholds")
    thresholds = np.linspace(scores.min(), scores.max(), k)
    precision = np.empty(k)
    recall = np.empty(k)
    for i, thr in enumerate(thresholds):
        precision[i], recall[i] = precision_recall_at(scores, fault_flags, thr)
    return thresholds, precision, recall


@dataclass
class MetricsReport:
    """Per-group accuracies plus the thresholds and sweep that produced them."""

    binary_acc: dict[str, float]
    diag_acc: dict[str, float]
    thresholds: ThresholdSet
    sweep_thresholds: np.ndarray | None = None
    precision: np.ndarray | None = None
    recall: np.ndarray | None = None

    def __post_init__(self):
        for name, table in (("binary", self.binary_acc), ("diagnostic", self.diag_acc)):
            for group, value in table.items():
                if not 0.0 <= value <= 1.0:
                    raise ValueError(f"{name} accuracy for {group!r} is {value}, outside [0,1]")

    def to_csv(self, path) -> None:
        """Group-by-accuracy table; blank diagnostic cell where undefined."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["group", "binary_accuracy", "diagnostic_accuracy"])
            for group, acc in self.binary_acc.items():
                diag = self.diag_acc.get(group)
                writer.writerow(
                    [group, f"{acc:.6f}", "" if diag is None else f"{diag:.6f}"]
                )

    def thresholds_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["channel", "threshold"])
            writer.writerow(["alpha", f"{self.thresholds.alpha:.6f}"])
            if self.thresholds.clf_thresholds is not None:
                for j, thr in enumerate(self.thresholds.clf_thresholds):
                    writer.writerow([f"clf{j}", f"{thr:.6f}"])
            if self.thresholds.rec_threshold is not None:
                writer.writerow(["rec", f"{self.thresholds.rec_threshold:.6f}"])
