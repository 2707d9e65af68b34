"""Datasets, annotation dropping and missing-label statistics.

Dataset JSON layout::

    {"classes": [{"id": 0, "name": "cat"}, ...],
     "images": [{"id": "000001", "width": 500, "height": 375,
                 "annotations": [{"box": [x0, y0, x1, y1], "class_id": 0,
                                  "dropped": false}],
                 "proposals": [{"box": [...], "score": 0.9}]}]}

``dropped`` defaults to false, ``proposals`` is optional. Two optional
extras are understood: a per-annotation ``difficult`` flag (set by the VOC
converter) and a top-level ``provenance`` string (``"voc2007"`` switches the
default AP mode to 11-point).
"""

from __future__ import annotations

import json
import os
import xml.etree.ElementTree as ET
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .geometry import Box, as_array, iou_matrix, validate_box


class DatasetFormatError(ValueError):
    """Malformed dataset document; the message names the offending field."""


class CurationError(ValueError):
    """A curation request cannot be satisfied (e.g. infeasible drop rate)."""


@dataclass(frozen=True)
class Annotation:
    box: Box
    class_id: int
    dropped: bool = False
    difficult: bool = False

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")


@dataclass(frozen=True)
class Proposal:
    box: Box
    score: float = 0.0


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: float
    height: float
    annotations: Tuple[Annotation, ...] = ()
    proposals: Optional[Tuple[Proposal, ...]] = None

    @property
    def kept(self) -> List[Annotation]:
        return [a for a in self.annotations if not a.dropped]

    @property
    def dropped(self) -> List[Annotation]:
        return [a for a in self.annotations if a.dropped]

    def proposal_array(self) -> np.ndarray:
        return as_array([p.box for p in self.proposals or ()])


@dataclass(frozen=True)
class Dataset:
    images: Tuple[ImageRecord, ...]
    class_names: Mapping[int, str]
    provenance: Optional[str] = None

    def __post_init__(self):
        unknown = sorted(
            {a.class_id for im in self.images for a in im.annotations} - set(self.class_names)
        )
        if unknown:
            raise DatasetFormatError(f"annotations reference unknown class ids {unknown}")

    def image(self, image_id: str) -> ImageRecord:
        for im in self.images:
            if im.image_id == image_id:
                return im
        raise KeyError(image_id)

    @property
    def has_proposals(self) -> bool:
        return any(im.proposals for im in self.images)

    def num_annotations(self, include_dropped: bool = True) -> int:
        return sum(
            1 for im in self.images for a in im.annotations if include_dropped or not a.dropped
        )

    def undropped(self) -> "Dataset":
        """Copy with every ``dropped`` flag cleared."""
        return replace(
            self,
            images=tuple(
                replace(im, annotations=tuple(replace(a, dropped=False) for a in im.annotations))
                for im in self.images
            ),
        )


@dataclass(frozen=True)
class DropRecord:
    rate: float
    seed: int
    per_class_dropped: Dict[int, int]
    dropped_refs: List[Tuple[str, int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "rate": self.rate,
            "seed": self.seed,
            "per_class_dropped": {str(k): v for k, v in sorted(self.per_class_dropped.items())},
            "dropped_refs": [[img, idx] for img, idx in self.dropped_refs],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DropRecord":
        return cls(
            rate=float(doc["rate"]),
            seed=int(doc["seed"]),
            per_class_dropped={int(k): int(v) for k, v in doc["per_class_dropped"].items()},
            dropped_refs=[(str(a), int(b)) for a, b in doc["dropped_refs"]],
        )


# --------------------------------------------------------------------------
# serialization


def _field(doc, key, where, kind=None, default=...):
    if not isinstance(doc, dict):
        raise DatasetFormatError(f"{where}: expected an object")
    if key not in doc:
        if default is not ...:
            return default
        raise DatasetFormatError(f"{where}: missing field '{key}'")
    value = doc[key]
    if kind is not None and not isinstance(value, kind):
        raise DatasetFormatError(f"{where}.{key}: expected {kind}, got {type(value).__name__}")
    return value


def _box_field(doc, where) -> Box:
    raw = _field(doc, "box", where, list)
    try:
        return validate_box(raw)
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{where}.box: {exc}") from None


def dataset_from_json(doc: dict, clamp: bool = True) -> Dataset:
    """Build a :class:`Dataset` from its JSON document.

    Boxes are clamped to the image bounds unless ``clamp`` is false.
    """
    classes = _field(doc, "classes", "$", list)
    class_names = {}
    for i, c in enumerate(classes):
        cid = _field(c, "id", f"$.classes[{i}]", int)
        class_names[cid] = str(_field(c, "name", f"$.classes[{i}]", str))
    images = []
    for i, im in enumerate(_field(doc, "images", "$", list)):
        where = f"$.images[{i}]"
        image_id = str(_field(im, "id", where))
        width = float(_field(im, "width", where, (int, float)))
        height = float(_field(im, "height", where, (int, float)))
        if width <= 0 or height <= 0:
            raise DatasetFormatError(f"{where}: width and height must be positive")

        def fit(box: Box) -> Box:
            return box.clamp(width, height) if clamp else box

        anns = []
        for j, a in enumerate(_field(im, "annotations", where, list)):
            w = f"{where}.annotations[{j}]"
            cid = _field(a, "class_id", w, int)
            if cid not in class_names:
                raise DatasetFormatError(f"{w}.class_id: unknown class id {cid}")
            anns.append(
                Annotation(
                    box=fit(_box_field(a, w)),
                    class_id=cid,
                    dropped=bool(_field(a, "dropped", w, bool, False)),
                    difficult=bool(_field(a, "difficult", w, bool, False)),
                )
            )
        props = None
        if "proposals" in im:
            props = []
            for j, p in enumerate(_field(im, "proposals", where, list)):
                w = f"{where}.proposals[{j}]"
                props.append(
                    Proposal(fit(_box_field(p, w)), float(_field(p, "score", w, (int, float), 0.0)))
                )
            props = tuple(props)
        images.append(ImageRecord(image_id, width, height, tuple(anns), props))
    return Dataset(tuple(images), class_names, doc.get("provenance"))


def dataset_to_json(ds: Dataset) -> dict:
    doc: dict = {"classes": [{"id": k, "name": v} for k, v in sorted(ds.class_names.items())]}
    if ds.provenance is not None:
        doc["provenance"] = ds.provenance
    images = []
    for im in ds.images:
        anns = []
        for a in im.annotations:
            entry = {"box": list(a.box), "class_id": a.class_id, "dropped": a.dropped}
            if a.difficult:
                entry["difficult"] = True
            anns.append(entry)
        rec = {"id": im.image_id, "width": im.width, "height": im.height, "annotations": anns}
        if im.proposals is not None:
            rec["proposals"] = [{"box": list(p.box), "score": p.score} for p in im.proposals]
        images.append(rec)
    doc["images"] = images
    return doc


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(
                f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
            ) from None
    return dataset_from_json(doc)


def voc_to_dataset(
    xml_paths: Iterable[os.PathLike],
    class_names: Optional[Sequence[str]] = None,
    provenance: Optional[str] = "voc2007",
) -> Dataset:
    """Convert PASCAL VOC per-image XML annotation files.

    VOC coordinates are 1-based inclusive integer pixels; ``xmin`` maps to
    ``xmin - 1`` and ``xmax`` stays, so a box's width is ``xmax - xmin + 1``.
    ``difficult`` objects are imported with the flag set. When
    ``class_names`` is omitted, classes are numbered in sorted name order.
    """
    parsed = []
    for path in sorted(str(p) for p in xml_paths):
        root = ET.parse(path).getroot()
        size = root.find("size")
        width = float(size.findtext("width"))
        height = float(size.findtext("height"))
        image_id = os.path.splitext(root.findtext("filename") or os.path.basename(path))[0]
        objects = []
        for obj in root.iter("object"):
            bb = obj.find("bndbox")
            box = Box(
                float(bb.findtext("xmin")) - 1.0,
                float(bb.findtext("ymin")) - 1.0,
                float(bb.findtext("xmax")),
                float(bb.findtext("ymax")),
            )
            difficult = (obj.findtext("difficult") or "0").strip() == "1"
            objects.append((obj.findtext("name").strip(), box, difficult))
        parsed.append((image_id, width, height, objects))

    if class_names is None:
        class_names = sorted({name for *_, objs in parsed for name, _, _ in objs})
    index = {name: i for i, name in enumerate(class_names)}
    images = []
    for image_id, width, height, objects in parsed:
        anns = []
        for name, box, difficult in objects:
            if name not in index:
                raise DatasetFormatError(f"{image_id}: unknown class name '{name}'")
            anns.append(Annotation(box.clamp(width, height), index[name], difficult=difficult))
        images.append(ImageRecord(image_id, width, height, tuple(anns)))
    return Dataset(tuple(images), dict(enumerate(class_names)), provenance)


# --------------------------------------------------------------------------
# operations


def round_half_up(x) -> int:
    """Round to the nearest integer, halves away from zero (decimal semantics,
    so ``0.3 * 5`` rounds as 1.5)."""
    d = x if isinstance(x, Decimal) else Decimal(repr(x))
    return int(d.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def drop_counts(ds: Dataset, rate: float) -> Dict[int, int]:
    """Target number of dropped annotations per class."""
    totals = Counter(a.class_id for im in ds.images for a in im.annotations)
    return {c: round_half_up(Decimal(repr(rate)) * n) for c, n in sorted(totals.items())}


def drop_annotations(ds: Dataset, rate: float, seed: int) -> Tuple[Dataset, DropRecord]:
    """Mark ``round_half_up(rate * n_c)`` annotations of every class as dropped.

    Classes are processed in id order, each with its own random stream
    derived from ``(seed, class_id)``. Each drop is drawn uniformly from the
    class's annotations that are still kept and sit in an image with at
    least two kept annotations, so no image ever loses its last one.
    Existing ``dropped`` flags on the input are ignored.
    """
    if not 0.0 <= rate < 1.0:
        raise CurationError(f"drop rate must lie in [0, 1), got {rate}")
    ds = ds.undropped()

    refs_by_class: Dict[int, List[Tuple[int, int]]] = defaultdict(list)
    for i, im in enumerate(ds.images):
        for j, a in enumerate(im.annotations):
            refs_by_class[a.class_id].append((i, j))
    kept_count = [len(im.annotations) for im in ds.images]
    dropped: Set[Tuple[int, int]] = set()
    per_class: Dict[int, int] = {}

    for c, target in drop_counts(ds, rate).items():
        refs = refs_by_class[c]
        rng = np.random.default_rng([seed, c])
        for k in range(target):
            eligible = [r for r in refs if r not in dropped and kept_count[r[0]] >= 2]
            if not eligible:
                raise CurationError(
                    f"cannot drop {target} annotations of class {c} "
                    f"({ds.class_names[c]!r}) at rate {rate}: only {k} could be "
                    "dropped without emptying an image"
                )
            pick = eligible[int(rng.integers(len(eligible)))]
            dropped.add(pick)
            kept_count[pick[0]] -= 1
        per_class[c] = target

    images = []
    for i, im in enumerate(ds.images):
        anns = tuple(
            replace(a, dropped=(i, j) in dropped) for j, a in enumerate(im.annotations)
        )
        images.append(replace(im, annotations=anns))
    refs = sorted((ds.images[i].image_id, j) for i, j in dropped)
    return replace(ds, images=tuple(images)), DropRecord(rate, seed, per_class, refs)


@dataclass(frozen=True)
class HistogramBin:
    lo: float
    hi: float
    probability: float
    count: int


def overlap_risk_histogram(
    ds_curated: Dataset, bin_width: float = 0.05, fg_threshold: float = 0.5
) -> List[HistogramBin]:
    """How often a proposal hides a missing object, binned by kept overlap.

    Each proposal is binned by its max IoU with the kept annotations; a bin's
    probability is the fraction of its proposals whose max IoU with a
    dropped annotation reaches ``fg_threshold``. The last bin is closed.
    """
    if not ds_curated.has_proposals:
        raise CurationError("dataset has no proposals")
    if not 0 < bin_width <= 1:
        raise ValueError(f"bin_width must lie in (0, 1], got {bin_width}")
    n_bins = int(np.ceil(1.0 / bin_width - 1e-9))
    hits = np.zeros(n_bins)
    counts = np.zeros(n_bins, dtype=np.int64)
    for im in ds_curated.images:
        props = im.proposal_array()
        if len(props) == 0:
            continue
        kept = iou_matrix(props, [a.box for a in im.kept])
        drop = iou_matrix(props, [a.box for a in im.dropped])
        o_kept = kept.max(axis=1) if kept.shape[1] else np.zeros(len(props))
        risky = drop.max(axis=1) >= fg_threshold if drop.shape[1] else np.zeros(len(props), bool)
        idx = np.minimum((o_kept / bin_width).astype(int), n_bins - 1)
        np.add.at(counts, idx, 1)
        np.add.at(hits, idx, risky.astype(float))
    out = []
    for k in range(n_bins):
        prob = hits[k] / counts[k] if counts[k] else 0.0
        out.append(
            HistogramBin(k * bin_width, min((k + 1) * bin_width, 1.0), float(prob), int(counts[k]))
        )
    return out


def instance_counts(ds: Dataset) -> Counter:
    """Kept (annotated) instances per class."""
    return Counter(a.class_id for im in ds.images for a in im.kept)


def instances_per_image(ds: Dataset) -> Dict[int, float]:
    """Mean instance count over the images that contain each class."""
    per_image: Dict[int, List[int]] = defaultdict(list)
    for im in ds.images:
        for c, n in Counter(a.class_id for a in im.kept).items():
            per_image[c].append(n)
    return {c: float(np.mean(v)) for c, v in sorted(per_image.items())}


def select_subset_by_instance_counts(
    ds_train: Dataset, ds_test: Dataset, min_train: int, min_test: int
) -> Set[int]:
    """Classes with strictly more than ``min_train`` train instances and
    strictly more than ``min_test`` test instances.

    Use :func:`instances_per_image` on the test split to rank the result.
    """
    train = instance_counts(ds_train)
    test = instance_counts(ds_test)
    return {
        c
        for c in ds_train.class_names
        if train.get(c, 0) > min_train and test.get(c, 0) > min_test
    }
