"""VOC-style detection evaluation.

Matching is greedy in descending score order (ties: ``image_id``, then input
order). A detection is a true positive when the best-overlapping *unmatched*
ground-truth box of its class in its image reaches the IoU threshold; that
box is then consumed. Detections that only reach a ``difficult`` box are
ignored, and difficult boxes do not count towards the number of positives.
Dropped annotations are left out unless ``include_dropped`` is set.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .curation import Dataset
from .geometry import Box, as_array, iou_matrix, validate_box

ELEVEN_POINT = "eleven_point"
ALL_POINTS = "all_points"
AP_MODES = (ELEVEN_POINT, ALL_POINTS)


class Match(enum.Enum):
    TP = "TP"
    FP = "FP"
    IGNORED = "IGNORED"


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"detection score must be finite, got {self.score}")


@dataclass
class PRCurve:
    class_id: int
    iou_threshold: float
    recall: np.ndarray
    precision: np.ndarray


@dataclass
class EvalReport:
    iou_threshold: float
    ap_mode: str
    ap: Dict[int, float]
    n_gt: Dict[int, int]
    curves: Dict[int, PRCurve] = field(default_factory=dict, repr=False)

    @property
    def mAP(self) -> float:
        return float(np.mean(list(self.ap.values())))

    def to_json(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "ap_mode": self.ap_mode,
            "mAP": self.mAP,
            "ap": {str(k): v for k, v in sorted(self.ap.items())},
            "n_gt": {str(k): v for k, v in sorted(self.n_gt.items())},
        }


def default_ap_mode(ds: Dataset) -> str:
    return ELEVEN_POINT if (ds.provenance or "").lower() == "voc2007" else ALL_POINTS


def _ordered(dets: Sequence[Detection]) -> List[Detection]:
    keyed = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].image_id, i))
    return [dets[i] for i in keyed]


def _gt_by_image(gts: Dataset, class_id: int, include_dropped: bool):
    out = {}
    for im in gts.images:
        anns = [
            a
            for a in im.annotations
            if a.class_id == class_id and (include_dropped or not a.dropped)
        ]
        if anns:
            out[im.image_id] = (
                as_array([a.box for a in anns]),
                np.array([a.difficult for a in anns], dtype=bool),
            )
    return out


def count_gt(gts: Dataset, class_id: int, include_dropped: bool = False) -> int:
    return sum(
        1
        for im in gts.images
        for a in im.annotations
        if a.class_id == class_id and not a.difficult and (include_dropped or not a.dropped)
    )


def match_detections(
    dets: Sequence[Detection],
    gts: Dataset,
    class_id: int,
    iou_threshold: float = 0.5,
    include_dropped: bool = False,
) -> List[Tuple[Detection, Match]]:
    """Greedy TP/FP assignment for one class, returned in processing order."""
    ordered = _ordered([d for d in dets if d.class_id == class_id])
    per_image = _gt_by_image(gts, class_id, include_dropped)

    det_rows: Dict[str, List[int]] = defaultdict(list)
    for k, d in enumerate(ordered):
        det_rows[d.image_id].append(k)
    overlaps: Dict[int, List[float]] = {}
    for image_id, rows in det_rows.items():
        if image_id in per_image:
            ious = iou_matrix([ordered[k].box for k in rows], per_image[image_id][0]).tolist()
            for r, k in enumerate(rows):
                overlaps[k] = ious[r]

    difficult = {image_id: v[1].tolist() for image_id, v in per_image.items()}
    used = {image_id: [False] * len(v) for image_id, v in difficult.items()}
    out = []
    for k, d in enumerate(ordered):
        row = overlaps.get(k)
        if row is None:
            out.append((d, Match.FP))
            continue
        hard, taken = difficult[d.image_id], used[d.image_id]
        best, best_j = -1.0, -1
        for j, v in enumerate(row):
            if not hard[j] and not taken[j] and v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_threshold:
            taken[best_j] = True
            out.append((d, Match.TP))
        elif any(h and v >= iou_threshold for h, v in zip(hard, row)):
            out.append((d, Match.IGNORED))
        else:
            out.append((d, Match.FP))
    return out


def pr_points(matches: Sequence[Tuple[Detection, Match]], n_gt: int) -> Tuple[np.ndarray, np.ndarray]:
    flags = np.array([m is Match.TP for _, m in matches if m is not Match.IGNORED], dtype=float)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return recall, precision


def average_precision(
    matches: Sequence[Tuple[Detection, Match]], n_gt: int, mode: str = ALL_POINTS
) -> float:
    """AP from a ranked list of matches.

    ``eleven_point`` averages the interpolated precision at recall 0, 0.1,
    ..., 1 (VOC2007); ``all_points`` integrates the monotonized PR curve.
    """
    if n_gt < 1:
        raise ValueError("average precision needs at least one ground-truth box")
    if mode not in AP_MODES:
        raise ValueError(f"unknown ap mode {mode!r}; expected one of {AP_MODES}")
    recall, precision = pr_points(matches, n_gt)
    if mode == ELEVEN_POINT:
        total = 0.0
        for i in range(11):
            above = precision[recall >= i / 10]
            total += above.max() if above.size else 0.0
        return float(total / 11)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def mean_ap(
    dets: Sequence[Detection],
    gts: Dataset,
    iou_threshold: float = 0.5,
    mode: Optional[str] = None,
    include_dropped: bool = False,
) -> EvalReport:
    """Per-class AP and their mean over classes with at least one box."""
    mode = mode or default_ap_mode(gts)
    by_class: Dict[int, List[Detection]] = defaultdict(list)
    for d in dets:
        by_class[d.class_id].append(d)
    ap, n_gt, curves = {}, {}, {}
    for c in sorted(gts.class_names):
        n = count_gt(gts, c, include_dropped)
        if n == 0:
            continue
        matches = match_detections(by_class.get(c, []), gts, c, iou_threshold, include_dropped)
        ap[c] = average_precision(matches, n, mode)
        n_gt[c] = n
        recall, precision = pr_points(matches, n)
        curves[c] = PRCurve(c, iou_threshold, recall, precision)
    if not ap:
        raise ValueError("dataset has no annotations to evaluate against")
    return EvalReport(iou_threshold, mode, ap, n_gt, curves)


def threshold_sweep(
    dets: Sequence[Detection],
    gts: Dataset,
    thresholds: Iterable[float],
    mode: Optional[str] = None,
    include_dropped: bool = False,
) -> List[EvalReport]:
    thresholds = list(thresholds)
    if any(not 0 < t <= 1 for t in thresholds):
        raise ValueError(f"IoU thresholds must lie in (0, 1], got {thresholds}")
    if thresholds != sorted(thresholds):
        raise ValueError("IoU thresholds must be sorted ascending")
    return [mean_ap(dets, gts, t, mode, include_dropped) for t in thresholds]


def per_class_operating_threshold(
    dets: Sequence[Detection], gts: Dataset, iou_threshold: float = 0.5
) -> Tuple[Dict[int, float], List[int]]:
    """Score cutoff maximizing F1 for each class.

    A detection counts as predicted positive when ``score >= cutoff``.
    Candidates are the detection scores; ties on F1 go to the lowest cutoff.
    When every cutoff scores F1 = 0 the highest score is returned, i.e. the
    most conservative cutoff.

    Returns:
        ``(cutoffs, missing)`` where ``missing`` lists classes without
        detections.
    """
    by_class: Dict[int, List[Detection]] = defaultdict(list)
    for d in dets:
        by_class[d.class_id].append(d)
    cutoffs, missing = {}, []
    for c in sorted(gts.class_names):
        if not by_class.get(c):
            missing.append(c)
            continue
        n_gt = count_gt(gts, c)
        matches = [
            (d, m) for d, m in match_detections(by_class[c], gts, c, iou_threshold)
            if m is not Match.IGNORED
        ]
        best, best_cut = Fraction(-1), None
        tp = 0
        for k, (d, m) in enumerate(matches):
            tp += m is Match.TP
            # only evaluate at the end of a run of equal scores
            if k + 1 < len(matches) and matches[k + 1][0].score == d.score:
                continue
            f1 = Fraction(2 * tp, (k + 1) + n_gt)
            if f1 >= best:
                best, best_cut = f1, d.score
        if best <= 0:
            best_cut = max(d.score for d in by_class[c])
        cutoffs[c] = best_cut
    return cutoffs, missing


# --------------------------------------------------------------------------
# file formats


def detections_from_json(doc) -> List[Detection]:
    if not isinstance(doc, list):
        raise ValueError("detections file must hold a JSON array")
    out = []
    for i, d in enumerate(doc):
        try:
            out.append(
                Detection(str(d["image_id"]), validate_box(d["box"]), int(d["class_id"]), float(d["score"]))
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"detections[{i}]: {exc}") from None
    return out


def detections_to_json(dets: Iterable[Detection]) -> list:
    return [
        {"image_id": d.image_id, "class_id": d.class_id, "box": list(d.box), "score": d.score}
        for d in dets
    ]


def fmt(x: float) -> str:
    return f"{x:.6g}"


def reports_to_csv(reports: Sequence[EvalReport], class_names: Mapping[int, str]) -> str:
    """One row per class with an ``AP@tau`` column per report, plus an mAP row."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class"] + [f"AP@{fmt(r.iou_threshold)}" for r in reports])
    classes = sorted({c for r in reports for c in r.ap})
    for c in classes:
        writer.writerow(
            [class_names.get(c, str(c))] + [fmt(r.ap[c]) if c in r.ap else "" for r in reports]
        )
    writer.writerow(["mAP"] + [fmt(r.mAP) for r in reports])
    return buf.getvalue()


def reports_to_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True) + "\n"
