"""Strategy comparison on synthetic scenes.

For every (drop rate, seed) the same training scenes and the same dropped
annotations are shared by all strategies, so strategy differences are paired.
The test split is fixed by the scene config and is always fully annotated.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..curation import Dataset, DropRecord, drop_annotations
from ..evaluation import ALL_POINTS, Detection, EvalReport, mean_ap
from ..geometry import Box, iou_matrix
from ..sampling import (
    AssignmentConfig,
    GompertzParams,
    assign_arrays,
    oss_weight_array,
    per_class_thresholds,
    score_weight_array,
)
from .detector import TrainConfig, ToyDetector, nms, roi_scores, train_weighted
from .scenes import SceneConfig, SceneLatents, generate_scenes, roi_features

STRATEGIES = ("baseline", "hard_negative", "oss", "score_ss", "upper_bound")
DEFAULT_DROP_RATES = (0.0, 0.3, 0.4, 0.5)
TEST_SPLIT = 999_999


@dataclass(frozen=True)
class ExperimentSpec:
    strategy: str
    drop_rate: float
    gompertz: GompertzParams = GompertzParams()
    assignment: AssignmentConfig = AssignmentConfig(minibatch_size=32)
    scene: SceneConfig = SceneConfig()
    n_seeds: int = 20
    train: TrainConfig = TrainConfig()
    test_images: int = 200
    eval_iou: float = 0.5

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunLog:
    seed: int
    losses: List[float]
    params_digest: str
    report: EvalReport

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "losses": self.losses,
            "params_digest": self.params_digest,
            "report": self.report.to_json(),
        }


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    runs: List[RunLog] = field(default_factory=list)

    @property
    def maps(self) -> np.ndarray:
        return np.array([r.report.mAP for r in self.runs])

    @property
    def mean(self) -> float:
        return float(self.maps.mean())

    @property
    def sd(self) -> float:
        return float(self.maps.std(ddof=1)) if len(self.runs) > 1 else 0.0

    @property
    def se(self) -> float:
        return self.sd / np.sqrt(len(self.runs))


# --------------------------------------------------------------------------
# training data


@dataclass
class TrainingSet:
    """Flattened RoIs of a curated synthetic split."""

    dataset: Dataset
    X: np.ndarray
    y: np.ndarray  # class id, num_classes for background
    groups: np.ndarray  # image index per RoI
    overlap: np.ndarray  # max IoU with kept annotations
    dropped_overlap: np.ndarray  # max IoU with dropped annotations
    num_classes: int

    @property
    def is_positive(self) -> np.ndarray:
        return self.y != self.num_classes

    @property
    def n_images(self) -> int:
        return len(self.dataset.images)


def build_training_set(
    ds: Dataset, features: Dict[str, np.ndarray], assignment: AssignmentConfig
) -> TrainingSet:
    K = len(ds.class_names)
    X, y, groups, overlap, dropped_ov = [], [], [], [], []
    for i, im in enumerate(ds.images):
        props = im.proposal_array()
        kept = im.kept
        pos, ov, matched = assign_arrays(props, [a.box for a in kept], assignment.fg_threshold)
        classes = np.array([a.class_id for a in kept] or [K])
        y.append(np.where(pos, classes[np.maximum(matched, 0)], K))
        dious = iou_matrix(props, [a.box for a in im.dropped])
        dropped_ov.append(dious.max(axis=1) if dious.shape[1] else np.zeros(len(props)))
        X.append(features[im.image_id])
        groups.append(np.full(len(props), i))
        overlap.append(ov)
    return TrainingSet(
        ds,
        np.vstack(X),
        np.concatenate(y).astype(np.int64),
        np.concatenate(groups).astype(np.int64),
        np.concatenate(overlap),
        np.concatenate(dropped_ov),
        K,
    )


def strategy_weights(
    strategy: str,
    ts: TrainingSet,
    spec: ExperimentSpec,
    prior: Optional[ToyDetector] = None,
) -> np.ndarray:
    """Per-RoI loss weights for a strategy (0 removes the RoI)."""
    pos = ts.is_positive
    cfg = spec.assignment
    if strategy == "baseline":
        return np.ones(len(ts.y))
    if strategy == "hard_negative":
        return (pos | (ts.overlap >= cfg.hard_negative_min_overlap)).astype(float)
    if strategy == "oss":
        return oss_weight_array(pos, ts.overlap, spec.gompertz)
    if strategy == "upper_bound":
        return (ts.dropped_overlap < cfg.fg_threshold).astype(float)
    if strategy == "score_ss":
        if prior is None:
            raise ValueError("score_ss weights need a prior detector")
        _, gt_scores = score_training_set(prior, ts)
        thresholds = per_class_thresholds(gt_scores)
        cls, s = roi_scores(prior, ts.X)
        t = np.array([thresholds[int(c)] for c in cls])
        return score_weight_array(ts.overlap, s, t, spec.gompertz, cfg)
    raise ValueError(f"unknown strategy {strategy!r}")


def score_training_set(det: ToyDetector, ts: TrainingSet) -> Tuple[np.ndarray, Dict[int, List[float]]]:
    """Softmax scores for every RoI and, for every kept annotation, the
    detector's score for its class at its best-overlapping proposal."""
    probs = det.predict_proba(ts.X)
    gt_scores: Dict[int, List[float]] = defaultdict(list)
    start = 0
    for im in ts.dataset.images:
        n = len(im.proposals or ())
        kept = im.kept
        if n and kept:
            ious = iou_matrix(im.proposal_array(), [a.box for a in kept])
            best = ious.argmax(axis=0)
            for j, a in enumerate(kept):
                gt_scores[a.class_id].append(float(probs[start + best[j], a.class_id]))
        start += n
    return probs, dict(gt_scores)


def train_toy_detector(ts: TrainingSet, spec: ExperimentSpec, seed: int) -> ToyDetector:
    """Train under ``spec.strategy``.

    ``score_ss`` trains a baseline detector first, scores the training set
    with it and retrains from scratch with the resulting weights.
    """
    train = replace(spec.train, seed=seed)
    prior = None
    if spec.strategy == "score_ss":
        prior = train_weighted(
            ts.X, ts.y, np.ones(len(ts.y)), ts.groups, ts.n_images, ts.num_classes,
            spec.assignment, train,
        )
    w = strategy_weights(spec.strategy, ts, spec, prior)
    return train_weighted(
        ts.X, ts.y, w, ts.groups, ts.n_images, ts.num_classes, spec.assignment, train
    )


def detect(
    det: ToyDetector,
    ds: Dataset,
    features: Dict[str, np.ndarray],
    nms_iou: float = 0.5,
    max_per_image: Optional[int] = 100,
) -> List[Detection]:
    """Score every proposal for every class, apply per-class NMS and keep the
    ``max_per_image`` best survivors of each image."""
    out = []
    K = det.num_classes
    for im in ds.images:
        boxes = im.proposal_array()
        if not len(boxes):
            continue
        probs = det.predict_proba(features[im.image_id])
        ious = iou_matrix(boxes, boxes)
        keep = [(c, i) for c in range(K) for i in nms(boxes, probs[:, c], nms_iou, ious).tolist()]
        if max_per_image is not None and len(keep) > max_per_image:
            s = np.array([probs[i, c] for c, i in keep])
            top = np.sort(np.argsort(-s, kind="stable")[:max_per_image])
            keep = [keep[t] for t in top.tolist()]
        rows = boxes.tolist()
        for c, i in keep:
            out.append(Detection(im.image_id, Box(*rows[i]), c, float(probs[i, c])))
    return out


# --------------------------------------------------------------------------
# runner


class Lab:
    """Caches scenes, curated splits and features across specs and seeds."""

    def __init__(self):
        self._test: Dict[tuple, Tuple[Dataset, Dict[str, np.ndarray]]] = {}
        self._train: Dict[tuple, Tuple[Dataset, SceneLatents]] = {}
        self._curated: Dict[tuple, Tuple[TrainingSet, DropRecord]] = {}

    def test_split(self, spec: ExperimentSpec):
        key = (spec.scene, spec.test_images)
        if key not in self._test:
            cfg = replace(spec.scene, n_images=spec.test_images)
            ds, lat = generate_scenes(cfg, split_seed=TEST_SPLIT)
            self._test[key] = (ds, roi_features(ds, lat))
        return self._test[key]

    def training_set(self, spec: ExperimentSpec, seed: int) -> Tuple[TrainingSet, DropRecord]:
        key = (spec.scene, seed, spec.drop_rate, spec.assignment)
        if key not in self._curated:
            skey = (spec.scene, seed)
            if skey not in self._train:
                self._train[skey] = generate_scenes(spec.scene, split_seed=seed)
            ds, lat = self._train[skey]
            curated, record = drop_annotations(ds, spec.drop_rate, seed)
            feats = roi_features(curated, lat)
            self._curated[key] = (build_training_set(curated, feats, spec.assignment), record)
        return self._curated[key]

    def run(self, spec: ExperimentSpec, seed: int) -> RunLog:
        ts, _ = self.training_set(spec, seed)
        det = train_toy_detector(ts, spec, seed)
        test_ds, test_feats = self.test_split(spec)
        report = mean_ap(detect(det, test_ds, test_feats), test_ds, spec.eval_iou, ALL_POINTS)
        return RunLog(seed, det.losses, det.params_digest(), report)


def run_strategy_comparison(
    specs: Sequence[ExperimentSpec],
    progress: Optional[Callable[[ExperimentSpec, int], None]] = None,
) -> List[ExperimentResult]:
    lab = Lab()
    results = []
    for spec in specs:
        result = ExperimentResult(spec)
        for seed in range(spec.n_seeds):
            if progress is not None:
                progress(spec, seed)
            result.runs.append(lab.run(spec, seed))
        results.append(result)
    return results


def default_grid(
    n_seeds: int = 20,
    drop_rates: Sequence[float] = DEFAULT_DROP_RATES,
    strategies: Sequence[str] = STRATEGIES,
    **overrides,
) -> List[ExperimentSpec]:
    return [
        ExperimentSpec(strategy=s, drop_rate=r, n_seeds=n_seeds, **overrides)
        for s in strategies
        for r in drop_rates
    ]


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _table(results: Sequence[ExperimentResult], value: Callable[[ExperimentResult], float]) -> str:
    rates = sorted({r.spec.drop_rate for r in results})
    cells: Dict[Tuple[str, float], float] = {}
    for r in results:
        cells[(r.spec.strategy, r.spec.drop_rate)] = value(r)
    strategies = [s for s in STRATEGIES if any(r.spec.strategy == s for r in results)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["strategy"] + [f"drop_{_fmt(rate)}" for rate in rates])
    for s in strategies:
        writer.writerow([s] + [_fmt(cells[(s, rate)]) if (s, rate) in cells else "" for rate in rates])
    return buf.getvalue()


def results_table_csv(results: Sequence[ExperimentResult]) -> str:
    """Mean mAP, strategies as rows and drop rates as columns."""
    return _table(results, lambda r: r.mean)


def results_sd_csv(results: Sequence[ExperimentResult]) -> str:
    return _table(results, lambda r: r.sd)
