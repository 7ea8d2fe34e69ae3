"""Monte-Carlo dropout inference and entropy diagnostics.

T stochastic forward passes with dropout left on give per-output sample sets;
the predictive mean and population variance summarize them.  Sums are reduced
in sample-index order so repeated runs with the same seed reproduce the
statistics bitwise.  Entropy is the natural-log entropy of the predictive
mean distribution, with the usual 0*log(0) = 0 convention.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .model import PathwayNetwork
from .nncore import as_matrix


def _sequential_mean_var(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population variance accumulated in sample-index order.

    Uses the running update
        delta = x_k - mean;  mean += delta / (k + 1);  m2 += delta * (x_k - mean)
    and returns (mean, m2 / T).  The exact recurrence and its loop order are
    part of the contract: recomputing it from the same sample array
    reproduces both statistics bitwise, and a constant sample set yields the
    sample itself as mean and exactly zero variance.
    """
    t = samples.shape[0]
    mean = np.zeros_like(samples[0])
    m2 = np.zeros_like(samples[0])
    for k in range(t):
        delta = samples[k] - mean
        mean = mean + delta / (k + 1)
        m2 = m2 + delta * (samples[k] - mean)
    # the update can leave a negative rounding residue of order 1e-30;
    # clamp so the population-variance lower bound holds exactly
    return mean, np.maximum(m2, 0.0) / t


@dataclass
class McPrediction:
    """Samples from T stochastic passes plus their mean and variance."""

    samples: np.ndarray  # (T, C)
    mean: np.ndarray  # (C,)
    variance: np.ndarray  # (C,)

    @property
    def t(self) -> int:
        return self.samples.shape[0]

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "McPrediction":
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2:
            raise ValueError("samples must be a (T, C) array")
        mean, variance = _sequential_mean_var(samples)
        return cls(samples=samples, mean=mean, variance=variance)


class McSampleResult(NamedTuple):
    classifier: McPrediction | None
    reconstruction: McPrediction | None


def mc_sample(
    net: PathwayNetwork, x: np.ndarray, t: int, rng: np.random.Generator
) -> McSampleResult:
    """Run T dropout-active passes on a single input.

    One encoder pass per sample feeds whichever output pathways the network
    has, so classifier and reconstruction samples share each pass's dropout
    mask.  Requires t >= 2; a dropout rate of 0 is allowed and simply yields
    zero variance.
    """
    if t < 2:
        raise ValueError(f"need at least 2 samples, got {t}")
    x = as_matrix(np.asarray(x, dtype=np.float64))
    if x.shape[0] != 1:
        raise ValueError("mc_sample takes a single example; see the batch helpers")
    clf_samples = [] if net.head is not None else None
    rec_samples = [] if net.decoder is not None else None
    for _ in range(t):
        h = net.encoder.forward(x, rng, stochastic=True)
        if clf_samples is not None:
            clf_samples.append(net.head.forward(h)[0])
        if rec_samples is not None:
            rec_samples.append(net.decoder.forward(h)[0])
    clf = McPrediction.from_samples(np.stack(clf_samples)) if clf_samples is not None else None
    rec = McPrediction.from_samples(np.stack(rec_samples)) if rec_samples is not None else None
    return McSampleResult(classifier=clf, reconstruction=rec)


def mc_classify_batch(
    net: PathwayNetwork, x: np.ndarray, t: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Batched MC classification: returns (mean, variance), each (N, C)."""
    if t < 2:
        raise ValueError(f"need at least 2 samples, got {t}")
    if net.head is None:
        raise ValueError(f"{net.kind.value} model has no classifier head")
    x = as_matrix(np.asarray(x, dtype=np.float64))
    samples = np.empty((t, x.shape[0], net.n_outputs))
    for k in range(t):
        samples[k] = net.forward_classify(x, rng, stochastic=True)
    return _sequential_mean_var(samples)


def mc_reconstruct_batch(
    net: PathwayNetwork, x: np.ndarray, t: int, rng: np.random.Generator
) -> np.ndarray:
    """Batched MC reconstruction predictive mean, (N, D).

    Only the running sum is kept, so memory stays flat in T; the source
    passes are still accumulated in sample-index order.
    """
    if t < 2:
        raise ValueError(f"need at least 2 samples, got {t}")
    if net.decoder is None:
        raise ValueError(f"{net.kind.value} model has no decoder")
    x = as_matrix(np.asarray(x, dtype=np.float64))
    total = np.zeros_like(x)
    for _ in range(t):
        xhat, _ = net.forward_reconstruct(x, rng, stochastic=True)
        total = total + xhat
    return total / t


def expand_binary(mean: np.ndarray) -> np.ndarray:
    """Turn a single sigmoid output p into the two-class vector [1-p, p]."""
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    if mean.size != 1:
        raise ValueError("expected a single sigmoid output")
    p = float(mean[0])
    return np.array([1.0 - p, p])


def predictive_entropy(mean) -> float:
    """Natural-log entropy of a predictive mean distribution.

    A scalar or length-1 vector is treated as the positive-class probability
    of a two-class output.  Entries must be non-negative and sum to 1 within
    1e-6.
    """
    p = np.asarray(mean, dtype=np.float64).reshape(-1)
    if p.size == 1:
        p = expand_binary(p)
    if np.any(p < 0.0):
        raise ValueError("probabilities must be non-negative")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return float(-terms.sum())


GROUP_NORMAL = 0  # I0: normal test examples
GROUP_FAULT_IN = 1  # I1: faults the model trained on
GROUP_OOD = 2  # I2: incipient or unknown conditions


def group_bucket(tag: str) -> int:
    """Map a group tag to its entropy-decomposition index set."""
    if tag == "normal":
        return GROUP_NORMAL
    if tag.startswith("fault:"):
        return GROUP_FAULT_IN
    if tag.startswith("incipient:") or tag == "unknown":
        return GROUP_OOD
    raise ValueError(f"unrecognized group tag {tag!r}")


@dataclass
class EntropyDecomposition:
    P0: float  # summed entropy over normal test indices
    P1_in: float  # over in-distribution fault indices
    P1_ood: float  # over out-of-distribution indices
    total: float

    @classmethod
    def from_parts(cls, p0: float, p1_in: float, p1_ood: float) -> "EntropyDecomposition":
        return cls(P0=p0, P1_in=p1_in, P1_ood=p1_ood, total=p0 + p1_in + p1_ood)


def decompose_entropies(entropies, groups) -> EntropyDecomposition:
    """Sum per-example entropies into the three index-set buckets."""
    entropies = np.asarray(entropies, dtype=np.float64).reshape(-1)
    if len(entropies) != len(groups):
        raise ValueError("entropy/group length mismatch")
    parts = [0.0, 0.0, 0.0]
    for h, tag in zip(entropies, groups):
        parts[group_bucket(tag)] += float(h)
    return EntropyDecomposition.from_parts(*parts)


def entropy_decomposition(
    net: PathwayNetwork, dataset, t: int, rng: np.random.Generator
) -> EntropyDecomposition:
    """MC-estimate predictive entropies on a tagged test set and bucket them.

    dataset needs X (features) and group (one tag per row); every tag must
    map to normal, in-distribution fault, or out-of-distribution.
    """
    x = np.asarray(dataset.X, dtype=np.float64)
    groups = list(dataset.group)
    if len(x) != len(groups):
        raise ValueError("feature/group length mismatch")
    mean, _ = mc_classify_batch(net, x, t, rng)
    entropies = [predictive_entropy(mean[i]) for i in range(len(x))]
    return decompose_entropies(entropies, groups)


def write_histogram_csv(pred: McPrediction, path, bins: int = 20) -> None:
    """Per-output histogram of the MC samples: output, bin_left, count.

    Outputs whose samples all sit inside [0, 1] are binned over [0, 1] so
    different outputs line up; anything else is binned over its own range.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["output", "bin_left", "count"])
        for j in range(pred.samples.shape[1]):
            col = pred.samples[:, j]
            lo, hi = float(col.min()), float(col.max())
            if 0.0 <= lo and hi <= 1.0:
                lo, hi = 0.0, 1.0
            elif lo == hi:
                hi = lo + 1.0
            counts, edges = np.histogram(col, bins=bins, range=(lo, hi))
            for count, left in zip(counts, edges[:-1]):
                writer.writerow([j, f"{left:.6f}", int(count)])
