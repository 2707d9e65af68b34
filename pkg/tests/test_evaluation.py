import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_box
from oracles import ap_ref, best_f1_cutoff, match_enum, match_ref
from softsample.curation import Annotation, Dataset, ImageRecord, load_dataset
from softsample.evaluation import (
    ALL_POINTS,
    ELEVEN_POINT,
    Detection,
    Match,
    average_precision,
    default_ap_mode,
    detections_from_json,
    detections_to_json,
    match_detections,
    mean_ap,
    per_class_operating_threshold,
    reports_to_csv,
    threshold_sweep,
)
from softsample.geometry import Box


def ds_from(gts_by_image, classes=(0,), provenance=None):
    images = tuple(
        ImageRecord(img, 100.0, 100.0, tuple(anns)) for img, anns in sorted(gts_by_image.items())
    )
    return Dataset(images, {c: f"c{c}" for c in classes}, provenance)


def flags_matches(flags):
    d = Detection("x", Box(0, 0, 1, 1), 0, 1.0)
    return [(d, Match.TP if f else Match.FP) for f in flags]


def test_detection_score_must_be_finite():
    with pytest.raises(ValueError):
        Detection("a", Box(0, 0, 1, 1), 0, math.nan)


def test_fixture_ap(data_dir):
    ds = load_dataset(data_dir / "eval_fixture_dataset.json")
    dets = detections_from_json(json.loads((data_dir / "eval_fixture_detections.json").read_text()))
    r = mean_ap(dets, ds, 0.5, ALL_POINTS)
    assert r.ap[0] == 0.5 and r.ap[1] == 1.0
    r = mean_ap(dets, ds, 0.5, ELEVEN_POINT)
    assert abs(r.ap[0] - 6 / 11) < 1e-12 and r.ap[1] == 1.0
    assert r.mAP == pytest.approx((6 / 11 + 1) / 2)


def test_ap_basic_cases():
    for mode in (ALL_POINTS, ELEVEN_POINT):
        assert average_precision(flags_matches([True, True]), 2, mode) == 1.0
        assert average_precision([], 3, mode) == 0.0
        assert average_precision(flags_matches([False, False]), 1, mode) == 0.0
    with pytest.raises(ValueError):
        average_precision([], 0)
    with pytest.raises(ValueError):
        average_precision([], 1, "coco")


def test_ap_matches_rational_oracle(rng):
    for _ in range(500):
        n_gt = int(rng.integers(1, 8))
        flags = list(rng.random(int(rng.integers(0, 12))) < 0.5)
        flags = flags[: n_gt + sum(not f for f in flags)]
        while sum(flags) > n_gt:
            flags[flags.index(True)] = False
        for mode in (ALL_POINTS, ELEVEN_POINT):
            got = average_precision(flags_matches(flags), n_gt, mode)
            assert got == pytest.approx(float(ap_ref(flags, n_gt, mode)), abs=1e-12)


def test_ap_modes_within_one_eleventh(rng):
    for _ in range(500):
        n_gt = int(rng.integers(1, 10))
        flags = list(rng.random(int(rng.integers(0, 15))) < 0.6)
        while sum(flags) > n_gt:
            flags[flags.index(True)] = False
        a = average_precision(flags_matches(flags), n_gt, ALL_POINTS)
        e = average_precision(flags_matches(flags), n_gt, ELEVEN_POINT)
        assert 0 <= a <= 1
        assert abs(a - e) <= 1 / 11 + 1e-12


def test_duplicate_detection_is_fp():
    ds = ds_from({"a": [Annotation(Box(0, 0, 10, 10), 0)]})
    dets = [Detection("a", Box(0, 0, 10, 10), 0, 0.9), Detection("a", Box(0, 0, 10, 10), 0, 0.8)]
    m = match_detections(dets, ds, 0)
    assert [x for _, x in m] == [Match.TP, Match.FP]


def test_tie_breaking_is_deterministic():
    ds = ds_from({"a": [Annotation(Box(0, 0, 10, 10), 0)], "b": [Annotation(Box(0, 0, 10, 10), 0)]})
    dets = [Detection("b", Box(0, 0, 10, 10), 0, 0.5), Detection("a", Box(0, 0, 10, 10), 0, 0.5)]
    assert [d.image_id for d, _ in match_detections(dets, ds, 0)] == ["a", "b"]


def test_matching_matches_oracles(rng):
    for _ in range(300):
        n_img = int(rng.integers(1, 3))
        gts = {
            f"i{k}": [(random_box(rng, 10), bool(rng.random() < 0.2)) for _ in range(int(rng.integers(0, 4)))]
            for k in range(n_img)
        }
        dets = [
            (f"i{int(rng.integers(n_img))}", random_box(rng, 10), float(rng.integers(0, 4)) / 4)
            for _ in range(int(rng.integers(0, 7)))
        ]
        ds = ds_from({k: [Annotation(b, 0, difficult=d) for b, d in v] for k, v in gts.items()})
        objs = [Detection(i, b, 0, s) for i, b, s in dets]
        got = {id(d): m for d, m in match_detections(objs, ds, 0)}
        want = match_ref(dets, gts)
        assert [got[id(d)] for d in objs] == want


def test_matching_matches_enumeration(rng):
    for _ in range(200):
        gts = [random_box(rng, 8) for _ in range(int(rng.integers(0, 4)))]
        dets = [(random_box(rng, 8), float(rng.integers(0, 3))) for _ in range(int(rng.integers(0, 6)))]
        ds = ds_from({"a": [Annotation(g, 0) for g in gts]})
        objs = [Detection("a", b, 0, s) for b, s in dets]
        got = {id(d): m for d, m in match_detections(objs, ds, 0)}
        assert [got[id(d)] is Match.TP for d in objs] == match_enum(dets, gts)


def test_difficult_and_dropped():
    anns = [Annotation(Box(0, 0, 10, 10), 0, difficult=True), Annotation(Box(50, 50, 60, 60), 0, dropped=True),
            Annotation(Box(20, 20, 40, 40), 0)]
    ds = ds_from({"a": anns})
    dets = [Detection("a", Box(0, 0, 10, 10), 0, 0.9), Detection("a", Box(50, 50, 60, 60), 0, 0.8),
            Detection("a", Box(20, 20, 40, 40), 0, 0.7)]
    assert [m for _, m in match_detections(dets, ds, 0)] == [Match.IGNORED, Match.FP, Match.TP]
    r = mean_ap(dets, ds, 0.5, ALL_POINTS)
    assert r.n_gt[0] == 1 and r.ap[0] == 0.5
    assert [m for _, m in match_detections(dets, ds, 0, include_dropped=True)] == [
        Match.IGNORED, Match.TP, Match.TP]
    assert mean_ap(dets, ds, 0.5, ALL_POINTS, include_dropped=True).ap[0] == 1.0


def random_eval_instance(rng, classes=2):
    gts = {}
    dets = []
    for k in range(4):
        anns = [Annotation(random_box(rng, 30), int(rng.integers(classes))) for _ in range(3)]
        gts[f"i{k}"] = anns
        for a in anns:
            if rng.random() < 0.7:
                b = a.box
                j = rng.normal(0, 2, 4)
                box = Box(b.x_min + j[0], b.y_min + j[1], max(b.x_max + j[2], b.x_min + j[0]), max(b.y_max + j[3], b.y_min + j[1]))
                dets.append(Detection(f"i{k}", box, a.class_id, float(rng.random())))
        for _ in range(2):
            dets.append(Detection(f"i{k}", random_box(rng, 30), int(rng.integers(classes)), float(rng.random())))
    return ds_from(gts, tuple(range(classes))), dets


def test_monotone_transform_invariance(rng):
    for _ in range(100):
        ds, dets = random_eval_instance(rng)
        warped = [Detection(d.image_id, d.box, d.class_id, math.exp(3 * d.score) - 7) for d in dets]
        for mode in (ALL_POINTS, ELEVEN_POINT):
            assert mean_ap(dets, ds, 0.5, mode).ap == mean_ap(warped, ds, 0.5, mode).ap


def test_low_duplicate_fp_never_helps(rng):
    for _ in range(100):
        ds, dets = random_eval_instance(rng)
        low = min(d.score for d in dets) - 1
        extra = dets + [Detection("i0", Box(90, 90, 95, 95), 0, low)]
        for mode in (ALL_POINTS, ELEVEN_POINT):
            a = mean_ap(dets, ds, 0.5, mode).ap
            b = mean_ap(extra, ds, 0.5, mode).ap
            assert all(b[c] <= a[c] for c in a)


def test_perfect_and_single_class_reduction(rng):
    ds, _ = random_eval_instance(rng)
    perfect = [Detection(im.image_id, a.box, a.class_id, 1.0) for im in ds.images for a in im.annotations]
    for r in threshold_sweep(perfect, ds, [0.5, 0.75, 1.0]):
        assert r.mAP == 1.0
    ds, dets = random_eval_instance(rng, classes=1)
    r = mean_ap(dets, ds, 0.5, ALL_POINTS)
    assert r.mAP == average_precision(match_detections(dets, ds, 0), r.n_gt[0], ALL_POINTS)


def test_default_mode_and_errors():
    assert default_ap_mode(ds_from({}, provenance="VOC2007")) == ELEVEN_POINT
    assert default_ap_mode(ds_from({})) == ALL_POINTS
    with pytest.raises(ValueError):
        mean_ap([], ds_from({"a": []}))
    with pytest.raises(ValueError):
        threshold_sweep([], ds_from({"a": [Annotation(Box(0, 0, 1, 1), 0)]}), [0.75, 0.5])
    with pytest.raises(ValueError):
        threshold_sweep([], ds_from({"a": [Annotation(Box(0, 0, 1, 1), 0)]}), [0.0])


def test_sweep_is_monotone(rng):
    for _ in range(30):
        ds, dets = random_eval_instance(rng)
        maps = [r.mAP for r in threshold_sweep(dets, ds, [0.1, 0.3, 0.5, 0.7, 0.9])]
        assert all(a >= b - 1e-12 for a, b in zip(maps, maps[1:]))
        assert threshold_sweep(dets, ds, [0.5])[0].ap == mean_ap(dets, ds, 0.5).ap


def test_operating_threshold_examples():
    ds = ds_from({"a": [Annotation(Box(0, 0, 10, 10), 0), Annotation(Box(20, 20, 30, 30), 0)]}, (0, 1))
    dets = [Detection("a", Box(0, 0, 10, 10), 0, 0.9), Detection("a", Box(20, 20, 30, 30), 0, 0.8),
            Detection("a", Box(50, 50, 60, 60), 0, 0.3)]
    cut, missing = per_class_operating_threshold(dets, ds)
    assert cut == {0: 0.8} and missing == [1]
    fps = [Detection("a", Box(50, 50, 60, 60), 0, s) for s in (0.2, 0.7, 0.4)]
    cut, _ = per_class_operating_threshold(fps, ds)
    assert cut[0] == 0.7


def test_operating_threshold_brute_force(rng):
    for _ in range(100):
        ds, dets = random_eval_instance(rng, classes=1)
        dets = [Detection(d.image_id, d.box, d.class_id, round(d.score, 1)) for d in dets]
        cut, _ = per_class_operating_threshold(dets, ds)
        matches = match_detections(dets, ds, 0)
        n_gt = mean_ap(dets, ds).n_gt[0]
        best, want = best_f1_cutoff([(d.score, m is Match.TP) for d, m in matches], n_gt)
        if best == 0:
            want = max(d.score for d in dets)
        assert cut[0] == want


def test_io_roundtrip_and_csv(data_dir):
    ds = load_dataset(data_dir / "eval_fixture_dataset.json")
    raw = json.loads((data_dir / "eval_fixture_detections.json").read_text())
    dets = detections_from_json(raw)
    assert detections_from_json(detections_to_json(dets)) == dets
    with pytest.raises(ValueError, match=r"detections\[0\]"):
        detections_from_json([{"image_id": "a", "class_id": 0, "box": [0, 0, 1], "score": 1}])
    csv_text = reports_to_csv(threshold_sweep(dets, ds, [0.5, 0.75], ALL_POINTS), ds.class_names)
    assert csv_text.splitlines() == ["class,AP@0.5,AP@0.75", "cat,0.5,0.5", "dog,1,1", "mAP,0.75,0.75"]
