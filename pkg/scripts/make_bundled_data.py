"""Regenerate the JSON files under src/softsample/data."""

import json
from pathlib import Path

import numpy as np

from softsample.curation import Annotation, Dataset, ImageRecord, Proposal, dataset_to_json
from softsample.geometry import Box

OUT = Path(__file__).resolve().parents[1] / "src" / "softsample" / "data"
CLASSES = ["person", "car", "dog", "bottle", "chair"]


def _int_box(x0, y0, x1, y1, w, h):
    x0, y0 = max(0, int(round(x0))), max(0, int(round(y0)))
    x1, y1 = min(w, int(round(x1))), min(h, int(round(y1)))
    return Box(float(x0), float(y0), float(max(x1, x0 + 2)), float(max(y1, y0 + 2)))


def sample_dataset(n_images=20, seed=2024):
    rng = np.random.default_rng(seed)
    images = []
    for n in range(n_images):
        w, h = (500.0, 375.0) if rng.random() < 0.6 else (375.0, 500.0)
        n_obj = int(rng.integers(2, 6))
        anns = []
        for _ in range(n_obj):
            bw, bh = rng.uniform(0.12, 0.45) * w, rng.uniform(0.12, 0.45) * h
            x0, y0 = rng.uniform(0, w - bw), rng.uniform(0, h - bh)
            anns.append(Annotation(_int_box(x0, y0, x0 + bw, y0 + bh, w, h), int(rng.integers(len(CLASSES)))))
        props = []
        for a in anns:
            b = a.box
            for _ in range(6):
                j = rng.normal(0, 0.15, 4) * [b.width, b.height, b.width, b.height]
                box = _int_box(b.x_min + j[0], b.y_min + j[1], b.x_max + j[2], b.y_max + j[3], w, h)
                props.append(Proposal(box, round(float(rng.uniform(0.3, 1.0)), 4)))
        for _ in range(10):
            bw, bh = rng.uniform(0.1, 0.4) * w, rng.uniform(0.1, 0.4) * h
            x0, y0 = rng.uniform(0, w - bw), rng.uniform(0, h - bh)
            props.append(Proposal(_int_box(x0, y0, x0 + bw, y0 + bh, w, h), round(float(rng.uniform(0, 0.6)), 4)))
        images.append(ImageRecord(f"sample_{n:03d}", w, h, tuple(anns), tuple(props)))
    return Dataset(tuple(images), dict(enumerate(CLASSES)), provenance="voc2007")


def eval_fixture():
    images = (
        ImageRecord("a", 100.0, 100.0, (Annotation(Box(10, 10, 50, 50), 0), Annotation(Box(60, 60, 90, 90), 1))),
        ImageRecord("b", 100.0, 100.0, (Annotation(Box(20, 20, 70, 70), 0),)),
    )
    ds = Dataset(images, {0: "cat", 1: "dog"}, provenance=None)
    dets = [
        {"image_id": "a", "class_id": 0, "box": [10, 10, 50, 50], "score": 0.9},
        {"image_id": "b", "class_id": 0, "box": [0, 80, 15, 95], "score": 0.8},
        {"image_id": "a", "class_id": 1, "box": [60, 60, 90, 90], "score": 0.7},
    ]
    return ds, dets


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    dump = lambda doc: json.dumps(doc, indent=2, sort_keys=True) + "\n"
    (OUT / "sample_voc20.json").write_text(dump(dataset_to_json(sample_dataset())))
    ds, dets = eval_fixture()
    (OUT / "eval_fixture_dataset.json").write_text(dump(dataset_to_json(ds)))
    (OUT / "eval_fixture_detections.json").write_text(dump(dets))


if __name__ == "__main__":
    main()
