"""A linear softmax RoI classifier trained with per-RoI loss weights.

Stands in for the classification head of a two-stage detector. Class ``K``
(the last row) is background.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator, List, Tuple

import numpy as np

from ..geometry import iou_matrix
from ..sampling import AssignmentConfig, minibatch_mask


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 30
    images_per_batch: int = 10
    l2: float = 1e-3
    seed: int = 0


@dataclass
class ToyDetector:
    W: np.ndarray  # (K + 1, d)
    bias: np.ndarray  # (K + 1,)
    train: TrainConfig = field(default_factory=TrainConfig)
    losses: List[float] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.W.shape[0] - 1

    def logits(self, X: np.ndarray) -> np.ndarray:
        return X @ self.W.T + self.bias

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.logits(X))

    def params_digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.W).tobytes())
        h.update(np.ascontiguousarray(self.bias).tobytes())
        return h.hexdigest()


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def weighted_loss(
    W: np.ndarray, bias: np.ndarray, X: np.ndarray, y: np.ndarray, w: np.ndarray, l2: float = 0.0
) -> float:
    """``sum_i w_i * CE_i / n + l2/2 * ||W||^2``."""
    z = X @ W.T + bias
    zmax = z.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    ce = logz - z[np.arange(len(y)), y]
    return float(np.dot(w, ce) / len(y) + 0.5 * l2 * np.sum(W * W))


def weighted_loss_grad(
    W: np.ndarray, bias: np.ndarray, X: np.ndarray, y: np.ndarray, w: np.ndarray, l2: float = 0.0
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Loss value and its gradients with respect to ``W`` and ``bias``."""
    n = len(y)
    z = X @ W.T + bias
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1)
    ce = np.log(s) + zmax[:, 0] - z[np.arange(n), y]
    loss = float(np.dot(w, ce) / n + 0.5 * l2 * np.sum(W * W))
    delta = e / s[:, None]
    delta[np.arange(n), y] -= 1.0
    delta *= w[:, None]
    delta /= n
    return loss, delta.T @ X + l2 * W, delta.sum(axis=0)


def iterate_minibatches(
    groups: np.ndarray,
    is_positive: np.ndarray,
    n_images: int,
    assignment: AssignmentConfig,
    train: TrainConfig,
    rng: np.random.Generator,
) -> Iterator[Tuple[int, np.ndarray]]:
    """Yield ``(epoch, row_indices)`` for every gradient step.

    Each epoch shuffles the images, splits them into batches of
    ``images_per_batch`` and samples a fixed-size RoI set per image.
    """
    by_image = np.argsort(groups, kind="stable")
    starts = np.searchsorted(groups[by_image], np.arange(n_images + 1))
    for epoch in range(train.epochs):
        keep = minibatch_mask(is_positive, groups, assignment, rng)
        perm = rng.permutation(n_images)
        for b in range(0, n_images, train.images_per_batch):
            rows = [by_image[starts[i] : starts[i + 1]] for i in perm[b : b + train.images_per_batch]]
            rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
            rows = np.sort(rows[keep[rows]])
            if len(rows):
                yield epoch, rows


def train_weighted(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray,
    groups: np.ndarray,
    n_images: int,
    num_classes: int,
    assignment: AssignmentConfig,
    train: TrainConfig = TrainConfig(),
) -> ToyDetector:
    """Mini-batch gradient descent on the weighted softmax loss.

    RoIs with weight 0 are removed before anything else, so they behave
    exactly as if absent. ``y`` uses ``num_classes`` for background.
    """
    live = weights > 0
    X, y, weights, groups = X[live], y[live], weights[live], groups[live]
    d = X.shape[1]
    W = np.zeros((num_classes + 1, d))
    bias = np.zeros(num_classes + 1)
    rng = np.random.default_rng([train.seed, 0x7EA])
    losses: List[float] = []
    epoch_loss, current = 0.0, 0
    for epoch, rows in iterate_minibatches(
        groups, y != num_classes, n_images, assignment, train, rng
    ):
        if epoch != current:
            losses.append(epoch_loss)
            epoch_loss, current = 0.0, epoch
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is checked below
            loss, gW, gb = weighted_loss_grad(W, bias, X[rows], y[rows], weights[rows], train.l2)
        if not np.isfinite(loss):
            raise TrainingDivergedError(epoch, loss)
        epoch_loss += loss
        with np.errstate(over="ignore", invalid="ignore"):
            W -= train.learning_rate * gW
            bias -= train.learning_rate * gb
    losses.append(epoch_loss)
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(bias))):
        raise TrainingDivergedError(current, float("nan"))
    return ToyDetector(W, bias, train, losses)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5, ious=None) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices by descending score.

    ``ious`` may carry a precomputed ``boxes`` x ``boxes`` IoU matrix.
    """
    if ious is None:
        ious = iou_matrix(boxes, boxes)
    order = np.argsort(-scores, kind="stable")
    suppress = ious[order][:, order] >= iou_threshold
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for k in range(len(order)):
        if alive[k]:
            keep.append(order[k])
            alive &= ~suppress[k]
    return np.asarray(keep, dtype=np.int64)


def roi_scores(det: ToyDetector, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Best foreground class and its probability for each RoI."""
    probs = det.predict_proba(X)[:, : det.num_classes]
    cls = probs.argmax(axis=1)
    return cls, probs[np.arange(len(cls)), cls]

