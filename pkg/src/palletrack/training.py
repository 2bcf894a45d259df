"""SGD training loop and k-fold cross-validation, fully seeded."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cnn import Network, TrainingDiverged, forward_batch, loss_and_gradients


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.03
    epochs: int = 20
    minibatch: int = 50
    folds: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.minibatch < 1:
            raise ValueError("epochs and minibatch must be >= 1")


def train_sgd(net: Network, data: np.ndarray, labels: np.ndarray,
              cfg: TrainConfig) -> list[float]:
    """Plain SGD with per-epoch seeded shuffling; returns the loss trace.

    The network is updated in place.  The last minibatch of an epoch may be
    short.  A non-finite loss aborts immediately with diagnostics.
    """
    data = np.asarray(data)
    labels = np.asarray(labels).reshape(-1)
    if data.shape[0] == 0:
        raise ValueError("empty training set")
    if data.shape[0] != labels.shape[0]:
        raise ValueError("data and labels have different lengths")
    if net.params is None:
        net.init_parameters(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(data.shape[0])
        epoch_loss = 0.0
        for lo in range(0, order.size, cfg.minibatch):
            batch = order[lo:lo + cfg.minibatch]
            loss, grads = loss_and_gradients(net, data[batch], labels[batch])
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch}, "
                    f"batch offset {lo} (learning rate {cfg.learning_rate} "
                    f"likely too large)")
            epoch_loss += loss * batch.size
            for p, g in zip(net.params, grads):
                if g is not None:
                    p["w"] -= cfg.learning_rate * g["w"]
                    p["b"] -= cfg.learning_rate * g["b"]
            net.version += 1
        trace.append(epoch_loss / order.size)
    return trace


def accuracy(net: Network, data: np.ndarray, labels: np.ndarray,
             batch: int = 64) -> float:
    labels = np.asarray(labels).reshape(-1)
    hits = 0
    for lo in range(0, data.shape[0], batch):
        probs = forward_batch(net, data[lo:lo + batch])
        hits += int(np.sum(probs.argmax(axis=1) == labels[lo:lo + batch]))
    return hits / max(1, labels.size)


def fold_partition(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Seeded partition of range(n) into `folds` near-equal validation folds."""
    if folds < 2:
        raise ValueError("cross-validation needs k >= 2")
    if folds > n:
        raise ValueError(f"k={folds} exceeds the dataset size {n}")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(order, folds)]


def kfold_cv(data: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
             network_factory: Callable[[], Network]
             ) -> tuple[list[float], float]:
    """Per-fold validation accuracies and their arithmetic mean.

    Each sample lands in exactly one validation fold; a fresh network from
    `network_factory` is trained on the remaining folds.
    """
    labels = np.asarray(labels).reshape(-1)
    folds = fold_partition(data.shape[0], cfg.folds, cfg.seed)
    accs = []
    for i, val_idx in enumerate(folds):
        train_mask = np.ones(data.shape[0], dtype=bool)
        train_mask[val_idx] = False
        net = network_factory()
        if net.params is None:
            net.init_parameters(cfg.seed + i)
        train_sgd(net, data[train_mask], labels[train_mask], cfg)
        accs.append(accuracy(net, data[val_idx], labels[val_idx]))
    return accs, float(np.mean(accs))
