"""Training loops: reconstruction warm-up, joint masked objective, benchmarks.

The joint objective applies the reconstruction loss only to normal-labeled
examples (per-example loss = clf + beta * rec * 1{y=0}); the masked term is
normalized by the full batch size so beta keeps a stable meaning regardless
of how many normals land in a batch.  All loops are seeded and
single-threaded; the same TrainConfig.seed reproduces weights bitwise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .model import PathwayNetwork
from .nncore import (
    AdamState,
    adam_step,
    binary_cross_entropy,
    cross_entropy,
    derive_rng,
    masked_mse,
    mse,
)


@dataclass
class TrainConfig:
    beta: float = 1.0
    epochs: int = 100
    pretrain_epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    # "until convergence" mode for the benchmark models: stop once validation
    # loss fails to improve by min_delta for patience epochs, then restore the
    # best weights; epochs acts as the cap
    early_stop: bool = False
    early_stop_min_delta: float = 1e-4
    early_stop_patience: int = 10
    val_fraction: float = 0.1


class EpochLog(NamedTuple):
    epoch: int
    clf_loss: float
    rec_loss: float
    total_loss: float


def write_history_csv(history: list[EpochLog], path) -> None:
    """Dump the per-epoch loss log; absent terms are written as 0."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "clf_loss", "rec_loss", "total_loss"])
        for row in history:
            writer.writerow(
                [row.epoch, f"{row.clf_loss:.6f}", f"{row.rec_loss:.6f}", f"{row.total_loss:.6f}"]
            )


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _as_xy(dataset) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(dataset.X, dtype=np.float64)
    y = np.asarray(dataset.y, dtype=np.int64)
    if len(x) != len(y):
        raise ValueError("feature/label length mismatch")
    if len(x) == 0:
        raise ValueError("training data is empty")
    return x, y


def _check_labels(net: PathwayNetwork, y: np.ndarray) -> None:
    if y.min() < 0 or y.max() >= net.n_classes:
        raise ValueError(
            f"labels must lie in [0, {net.n_classes}), got range [{y.min()}, {y.max()}]"
        )


def _classification_loss(net: PathwayNetwork, probs, yb):
    if net.n_outputs == 1:
        return binary_cross_entropy(probs, yb)
    return cross_entropy(probs, yb)


def joint_batch_gradients(
    net: PathwayNetwork,
    xb: np.ndarray,
    yb: np.ndarray,
    beta: float,
    rng: np.random.Generator | None = None,
    stochastic: bool = True,
) -> tuple[float, float]:
    """One forward/backward pass of the joint objective on a single batch.

    Gradients accumulate into the network's layers (call net.zero_grad()
    first).  Fault-labeled rows contribute exactly zero to the reconstruction
    term and its gradients.  Returns (clf_loss, masked rec_loss).
    """
    yb = np.asarray(yb)
    h = net.encoder.forward(xb, rng, stochastic)
    probs = net.head.forward(h)
    clf_loss, dlogits = _classification_loss(net, probs, yb)
    xhat = net.decoder.forward(h)
    rec_loss, dxhat = masked_mse(xhat, xb, yb == 0)
    grad_h = net.head.backward_from_logits(dlogits)
    if beta != 0.0:
        grad_h = grad_h + net.decoder.backward(beta * dxhat)
    net.encoder.backward(grad_h)
    return clf_loss, rec_loss


def pretrain_reconstruction(
    net: PathwayNetwork, normal_x: np.ndarray, cfg: TrainConfig
) -> list[EpochLog]:
    """Warm up encoder+decoder on reconstruction of normal examples only."""
    if net.decoder is None:
        raise ValueError("pretraining needs a decoder")
    normal_x = np.asarray(normal_x, dtype=np.float64)
    if normal_x.ndim != 2 or len(normal_x) == 0:
        raise ValueError("pretraining data must be a non-empty 2-d array")
    rng = derive_rng(cfg.seed, 1)
    pathway_params = net.encoder.params() + net.decoder.params()
    params = [p for p, _ in pathway_params]
    grads = [g for _, g in pathway_params]
    state = AdamState.for_params(params)
    history = []
    for epoch in range(cfg.pretrain_epochs):
        total, seen = 0.0, 0
        for idx in _batches(len(normal_x), cfg.batch_size, rng):
            xb = normal_x[idx]
            net.zero_grad()
            xhat, _ = net.forward_reconstruct(xb, rng, stochastic=True)
            loss, dxhat = mse(xhat, xb)
            dh = net.decoder.backward(dxhat)
            net.encoder.backward(dh)
            adam_step(params, grads, state, lr=cfg.lr)
            total += loss * len(idx)
            seen += len(idx)
        rec = total / seen
        history.append(EpochLog(epoch, 0.0, rec, rec))
    return history


def train_joint(net: PathwayNetwork, dataset, cfg: TrainConfig) -> list[EpochLog]:
    """Optimize clf + beta * masked rec over the full label set.

    Runs the reconstruction warm-up first when cfg.pretrain_epochs > 0, then
    cfg.epochs of the joint objective.  Returns the concatenated epoch log
    (warm-up epochs come first, numbering restarts at 0 for the joint phase).
    """
    if net.decoder is None or net.head is None:
        raise ValueError("joint training needs both a decoder and a classifier head")
    x, y = _as_xy(dataset)
    _check_labels(net, y)
    history = []
    if cfg.pretrain_epochs > 0:
        normals = x[y == 0]
        if len(normals) == 0:
            raise ValueError("joint warm-up needs at least one normal example")
        history.extend(pretrain_reconstruction(net, normals, cfg))
    rng = derive_rng(cfg.seed, 2)
    all_params = net.params()
    params = [p for p, _ in all_params]
    grads = [g for _, g in all_params]
    state = AdamState.for_params(params)
    for epoch in range(cfg.epochs):
        clf_total, rec_total, seen = 0.0, 0.0, 0
        for idx in _batches(len(x), cfg.batch_size, rng):
            net.zero_grad()
            clf_loss, rec_loss = joint_batch_gradients(
                net, x[idx], y[idx], cfg.beta, rng, stochastic=True
            )
            adam_step(params, grads, state, lr=cfg.lr)
            clf_total += clf_loss * len(idx)
            rec_total += rec_loss * len(idx)
            seen += len(idx)
        clf_m, rec_m = clf_total / seen, rec_total / seen
        history.append(EpochLog(epoch, clf_m, rec_m, clf_m + cfg.beta * rec_m))
    return history


def _val_split(n: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = derive_rng(cfg.seed, 3)
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * cfg.val_fraction)))
    if n_val >= n:
        raise ValueError("validation split leaves no training data")
    return perm[n_val:], perm[:n_val]


def _snapshot(params: list[np.ndarray]) -> list[np.ndarray]:
    return [p.copy() for p in params]


def _restore(params: list[np.ndarray], snap: list[np.ndarray]) -> None:
    for p, s in zip(params, snap):
        p[...] = s


def train_classifier(net: PathwayNetwork, dataset, cfg: TrainConfig) -> list[EpochLog]:
    """Cross-entropy training of the encoder + head (no reconstruction term).

    With cfg.early_stop the loop watches deterministic loss on a held-out
    slice of the training data and restores the best weights seen.  Without
    it the rng consumption per epoch matches train_joint exactly, so a joint
    run with beta=0 and no warm-up follows the identical parameter
    trajectory.
    """
    if net.head is None:
        raise ValueError("classification training needs a head")
    x, y = _as_xy(dataset)
    _check_labels(net, y)
    train_idx = np.arange(len(x))
    val_idx = None
    if cfg.early_stop:
        train_idx, val_idx = _val_split(len(x), cfg)
    xt, yt = x[train_idx], y[train_idx]
    rng = derive_rng(cfg.seed, 2)
    trainable = net.encoder.params() + net.head.params()
    params = [p for p, _ in trainable]
    grads = [g for _, g in trainable]
    state = AdamState.for_params(params)
    history = []
    best, stale, best_snap = np.inf, 0, None
    for epoch in range(cfg.epochs):
        clf_total, seen = 0.0, 0
        for idx in _batches(len(xt), cfg.batch_size, rng):
            xb, yb = xt[idx], yt[idx]
            net.zero_grad()
            probs = net.forward_classify(xb, rng, stochastic=True)
            loss, dlogits = _classification_loss(net, probs, yb)
            dh = net.head.backward_from_logits(dlogits)
            net.encoder.backward(dh)
            adam_step(params, grads, state, lr=cfg.lr)
            clf_total += loss * len(idx)
            seen += len(idx)
        clf_m = clf_total / seen
        history.append(EpochLog(epoch, clf_m, 0.0, clf_m))
        if val_idx is not None:
            probs = net.forward_classify(x[val_idx])
            val_loss, _ = _classification_loss(net, probs, y[val_idx])
            if val_loss < best - cfg.early_stop_min_delta:
                best, stale, best_snap = val_loss, 0, _snapshot(params)
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    if best_snap is not None:
        _restore(params, best_snap)
    return history


def train_autoencoder(net: PathwayNetwork, dataset, cfg: TrainConfig) -> list[EpochLog]:
    """Reconstruction-only training; refuses any fault-labeled example."""
    if net.decoder is None:
        raise ValueError("reconstruction training needs a decoder")
    x, y = _as_xy(dataset)
    if np.any(y != 0):
        raise ValueError("reconstruction training data must be all normal (label 0)")
    train_idx = np.arange(len(x))
    val_idx = None
    if cfg.early_stop:
        train_idx, val_idx = _val_split(len(x), cfg)
    xt = x[train_idx]
    rng = derive_rng(cfg.seed, 2)
    trainable = net.encoder.params() + net.decoder.params()
    params = [p for p, _ in trainable]
    grads = [g for _, g in trainable]
    state = AdamState.for_params(params)
    history = []
    best, stale, best_snap = np.inf, 0, None
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for idx in _batches(len(xt), cfg.batch_size, rng):
            xb = xt[idx]
            net.zero_grad()
            xhat, _ = net.forward_reconstruct(xb, rng, stochastic=True)
            loss, dxhat = mse(xhat, xb)
            dh = net.decoder.backward(dxhat)
            net.encoder.backward(dh)
            adam_step(params, grads, state, lr=cfg.lr)
            total += loss * len(idx)
            seen += len(idx)
        rec_m = total / seen
        history.append(EpochLog(epoch, 0.0, rec_m, rec_m))
        if val_idx is not None:
            xhat, _ = net.forward_reconstruct(x[val_idx])
            val_loss, _ = mse(xhat, x[val_idx])
            if val_loss < best - cfg.early_stop_min_delta:
                best, stale, best_snap = val_loss, 0, _snapshot(params)
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    if best_snap is not None:
        _restore(params, best_snap)
    return history
