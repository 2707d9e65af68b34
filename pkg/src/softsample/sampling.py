"""RoI label assignment and per-RoI loss weighting.

Strategies:

* baseline: every RoI weight 1, labels from the kept annotations.
* hard negative: drop negatives that do not overlap a kept annotation by at
  least ``hard_negative_min_overlap``.
* overlap soft sampling (OSS): negatives weighted by a Gompertz curve of
  their max overlap with kept annotations.
* score soft sampling: far negatives weighted by a Gompertz curve of
  ``T - s``, where ``s`` is a prior detector's score and ``T`` a per-class
  threshold (median score on annotated boxes).
* upper bound: proposals matching dropped annotations are removed from the
  loss.

Weights multiply the per-RoI classification loss. Positives always keep
weight 1.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .geometry import Box, as_array, iou_matrix


@dataclass(frozen=True)
class GompertzParams:
    a: float = 0.25
    b: float = 50.0
    c: float = 20.0

    def __post_init__(self):
        if not 0.0 <= self.a <= 1.0:
            raise ValueError(f"gompertz a must lie in [0, 1], got {self.a}")
        if not self.b > 0:
            raise ValueError(f"gompertz b must be positive, got {self.b}")
        if not self.c > 0:
            raise ValueError(f"gompertz c must be positive, got {self.c}")


@dataclass(frozen=True)
class AssignmentConfig:
    fg_threshold: float = 0.5
    hard_negative_min_overlap: float = 0.1
    minibatch_size: int = 128
    fg_fraction: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.hard_negative_min_overlap < self.fg_threshold <= 1.0:
            raise ValueError(
                "need 0 < hard_negative_min_overlap < fg_threshold <= 1, got "
                f"{self.hard_negative_min_overlap} and {self.fg_threshold}"
            )
        if not 0.0 < self.fg_fraction <= 1.0:
            raise ValueError(f"fg_fraction must lie in (0, 1], got {self.fg_fraction}")
        if self.minibatch_size < 1:
            raise ValueError(f"minibatch_size must be positive, got {self.minibatch_size}")


@dataclass(frozen=True)
class RoISample:
    box: Box
    label: Optional[int]  # class id for positives, None for negatives
    max_overlap: float
    weight: float = 1.0
    matched_gt: Optional[int] = None

    @property
    def is_positive(self) -> bool:
        return self.label is not None


class MissingThresholdError(KeyError):
    """A class needed by score soft sampling has no threshold."""


class ClassThresholds(dict):
    """Mapping ``class_id -> T`` with a descriptive error on missing classes."""

    def __missing__(self, class_id):
        raise MissingThresholdError(f"no score threshold for class {class_id}")


# --------------------------------------------------------------------------
# array kernels (shared with simlab)


def gompertz_excess(x, p: GompertzParams):
    """``G(x) - a``, free of the cancellation that flattens ``G`` near ``a``
    in double precision (with the defaults ``G(x) == a`` exactly for
    ``x`` below about 0.014)."""
    x = np.asarray(x, dtype=np.float64)
    out = (1.0 - p.a) * np.exp(-p.b * np.exp(-p.c * x))
    return float(out) if out.ndim == 0 else out


def gompertz(x, p: GompertzParams):
    """``a + (1 - a) * exp(-b * exp(-c * x))`` for scalar or array ``x``."""
    out = p.a + gompertz_excess(x, p)
    return float(out) if np.ndim(out) == 0 else out


def assign_arrays(
    proposals: np.ndarray, gt_boxes: np.ndarray, fg_threshold: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized assignment.

    Returns ``(is_positive, max_overlap, matched)``; ``matched`` is -1 where
    there are no ground-truth boxes.
    """
    ious = iou_matrix(proposals, gt_boxes)
    n = ious.shape[0]
    if ious.shape[1] == 0:
        return np.zeros(n, dtype=bool), np.zeros(n), np.full(n, -1, dtype=np.int64)
    matched = np.argmax(ious, axis=1)
    overlap = ious[np.arange(n), matched]
    return overlap >= fg_threshold, overlap, matched


def oss_weight_array(is_positive: np.ndarray, overlap: np.ndarray, p: GompertzParams) -> np.ndarray:
    return np.where(is_positive, 1.0, gompertz(overlap, p))


def score_weight_array(
    overlap: np.ndarray,
    scores: np.ndarray,
    thresholds: np.ndarray,
    p: GompertzParams,
    cfg: AssignmentConfig,
) -> np.ndarray:
    """Score soft-sampling weights; ``thresholds`` holds T for each RoI."""
    far = overlap < cfg.hard_negative_min_overlap
    return np.where(far, gompertz(thresholds - scores, p), 1.0)


def minibatch_mask(
    is_positive: np.ndarray,
    groups: np.ndarray,
    cfg: AssignmentConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per-group (per-image) fixed-size RoI sampling as a boolean mask.

    Within each group, at most ``floor(fg_fraction * minibatch_size)``
    positives are kept and the remainder of the batch is filled with
    negatives, both chosen uniformly without replacement. Groups no larger
    than ``minibatch_size`` are kept whole.
    """
    n = len(is_positive)
    if n == 0:
        return np.zeros(0, dtype=bool)
    fg_cap = int(cfg.fg_fraction * cfg.minibatch_size)
    keys = rng.random(n)
    # rank each RoI within its (group, polarity) bucket by its random key
    order = np.lexsort((keys, ~is_positive, groups))
    g_sorted = groups[order]
    pos_sorted = is_positive[order]
    bucket_start = np.ones(n, dtype=bool)
    bucket_start[1:] = (g_sorted[1:] != g_sorted[:-1]) | (pos_sorted[1:] != pos_sorted[:-1])
    idx = np.arange(n)
    start_idx = np.maximum.accumulate(np.where(bucket_start, idx, 0))
    rank = idx - start_idx

    _, inverse = np.unique(groups, return_inverse=True)
    n_pos_group = np.bincount(inverse, weights=is_positive.astype(float)).astype(int)
    pos_taken = np.minimum(n_pos_group, fg_cap)
    neg_quota = cfg.minibatch_size - pos_taken

    group_size = np.bincount(inverse)
    quota = np.where(pos_sorted, fg_cap, neg_quota[inverse[order]])
    keep_sorted = (rank < quota) | (group_size[inverse[order]] <= cfg.minibatch_size)
    mask = np.zeros(n, dtype=bool)
    mask[order] = keep_sorted
    return mask


# --------------------------------------------------------------------------
# public sequence API


def assign_labels(
    proposals: Sequence[Box],
    kept_gts: Sequence[Tuple[Box, int]],
    cfg: AssignmentConfig,
) -> List[RoISample]:
    """Label proposals against the kept annotations.

    A proposal is positive, with the class of its best-matching box, when its
    max IoU is at least ``cfg.fg_threshold``. All weights start at 1.
    """
    gt_boxes = as_array([g[0] for g in kept_gts])
    classes = [int(g[1]) for g in kept_gts]
    pos, overlap, matched = assign_arrays(as_array(proposals), gt_boxes, cfg.fg_threshold)
    out = []
    for i, box in enumerate(proposals):
        m = int(matched[i]) if matched[i] >= 0 else None
        out.append(
            RoISample(
                box=Box(*box),
                label=classes[m] if pos[i] else None,
                max_overlap=float(overlap[i]),
                weight=1.0,
                matched_gt=m,
            )
        )
    return out


def gompertz_weight(o: float, p: GompertzParams = GompertzParams()) -> float:
    return gompertz(o, p)


def overlap_soft_weights(
    samples: Sequence[RoISample], p: GompertzParams = GompertzParams()
) -> List[RoISample]:
    return [
        s if s.is_positive else replace(s, weight=gompertz_weight(s.max_overlap, p))
        for s in samples
    ]


def per_class_thresholds(gt_scores: Mapping[int, Iterable[float]]) -> ClassThresholds:
    """Median prior-detector score on the annotated boxes of each class.

    Even counts use the mean of the two middle values.
    """
    out = ClassThresholds()
    for class_id, scores in gt_scores.items():
        arr = np.asarray(list(scores), dtype=np.float64)
        if arr.size == 0:
            raise ValueError(
                f"class {class_id} has no scores on annotated boxes; "
                "the prior detector never fired on it"
            )
        out[class_id] = float(np.median(arr))
    return out


def score_soft_weights(
    samples: Sequence[RoISample],
    roi_scores: Sequence[Tuple[int, float]],
    thresholds: Mapping[int, float],
    p: GompertzParams = GompertzParams(),
    cfg: AssignmentConfig = AssignmentConfig(),
) -> List[RoISample]:
    """Re-weight far negatives by the prior detector's confidence.

    Args:
        samples: labeled RoIs.
        roi_scores: for each RoI, ``(class_id, score)`` where ``score`` is
            the prior detector's highest non-background score and
            ``class_id`` the class achieving it.
        thresholds: per-class ``T``.

    Only RoIs with ``max_overlap < hard_negative_min_overlap`` are touched;
    positives and hard negatives keep weight 1.
    """
    if len(roi_scores) != len(samples):
        raise ValueError(f"{len(samples)} samples but {len(roi_scores)} scores")
    out = []
    for s, (class_id, score) in zip(samples, roi_scores):
        if s.max_overlap >= cfg.hard_negative_min_overlap:
            out.append(replace(s, weight=1.0))
            continue
        if class_id not in thresholds:
            raise MissingThresholdError(f"no score threshold for class {class_id}")
        t = thresholds[class_id]
        out.append(replace(s, weight=gompertz(t - score, p)))
    return out


def hard_negative_filter(samples: Sequence[RoISample], cfg: AssignmentConfig) -> List[RoISample]:
    return [
        replace(s, weight=1.0)
        for s in samples
        if s.is_positive or s.max_overlap >= cfg.hard_negative_min_overlap
    ]


def top_k_overlap_selection(
    proposals: Sequence[Tuple[Box, float]],
    kept_gts: Sequence[Box],
    cfg: AssignmentConfig,
    pool_size: int = 6000,
    k: int = 300,
) -> List[Box]:
    """Hard-negative proposal pre-selection.

    Takes the ``pool_size`` highest-scoring proposals and returns the ``k``
    best of them (by score) whose max overlap with ``kept_gts`` reaches
    ``cfg.hard_negative_min_overlap``. Score ties keep input order.
    """
    if pool_size < k:
        raise ValueError(f"pool_size ({pool_size}) must be >= k ({k})")
    if not proposals:
        return []
    boxes = as_array([p[0] for p in proposals])
    scores = np.asarray([p[1] for p in proposals], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")[:pool_size]
    ious = iou_matrix(boxes[order], as_array(kept_gts))
    best = ious.max(axis=1) if ious.shape[1] else np.zeros(len(order))
    chosen = order[best >= cfg.hard_negative_min_overlap][:k]
    return [Box(*proposals[i][0]) for i in chosen]


def upper_bound_ignore_mask(
    proposals: Sequence[Box], dropped_gts: Sequence[Box], ignore_threshold: float = 0.5
) -> List[bool]:
    """True for proposals whose max IoU with a dropped annotation reaches
    ``ignore_threshold``; those RoIs are excluded from the loss."""
    ious = iou_matrix(proposals, dropped_gts)
    if ious.shape[1] == 0:
        return [False] * ious.shape[0]
    return [bool(v) for v in ious.max(axis=1) >= ignore_threshold]


def sample_minibatch(
    samples: Sequence[RoISample], cfg: AssignmentConfig, rng_seed: int
) -> List[RoISample]:
    """Fixed-size RoI minibatch for one image, deterministic in ``rng_seed``.

    Output order follows input order.
    """
    if len(samples) <= cfg.minibatch_size:
        return list(samples)
    is_pos = np.array([s.is_positive for s in samples], dtype=bool)
    mask = minibatch_mask(
        is_pos, np.zeros(len(samples), dtype=np.int64), cfg, np.random.default_rng(rng_seed)
    )
    return [s for s, keep in zip(samples, mask) if keep]

