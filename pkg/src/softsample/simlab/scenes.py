"""Synthetic detection scenes with latent RoI features.

Every object carries a feature vector drawn around its class mean. Every
proposal carries a "background" feature; background proposals are either
plain clutter (zero mean) or, with probability ``confuser_rate``, confusers
that share a class mean but also carry a class-specific signature that real
objects lack. A proposal's RoI feature blends the feature of the object it
overlaps most with its own background feature, weighted by that IoU.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from ..curation import Annotation, Dataset, ImageRecord, Proposal
from ..geometry import Box, as_array, iou_matrix


@dataclass(frozen=True)
class SceneConfig:
    n_images: int = 100
    classes: int = 5
    objects_per_image: Tuple[int, int] = (2, 6)  # inclusive uniform range
    feature_dim: int = 24
    class_feature_means: Optional[Tuple[Tuple[float, ...], ...]] = None
    class_mean_norm: float = 4.0
    feature_noise_scale: float = 1.0
    confuser_rate: float = 0.0
    confuser_signature_norm: float = 2.5
    proposal_jitter: float = 0.05
    proposals_per_object: int = 8
    background_proposals_per_image: int = 16
    image_size: Tuple[float, float] = (320.0, 240.0)
    object_scale: Tuple[float, float] = (0.1, 0.25)
    seed: int = 0

    def __post_init__(self):
        # accept lists from JSON configs
        for name in ("objects_per_image", "image_size", "object_scale"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.class_feature_means is not None:
            object.__setattr__(
                self, "class_feature_means", tuple(tuple(map(float, r)) for r in self.class_feature_means)
            )
        for name in ("n_images", "classes", "feature_dim", "proposals_per_object"):
            if getattr(self, name) < 1:
                raise ValueError(f"SceneConfig.{name} must be positive")
        if self.background_proposals_per_image < 0:
            raise ValueError("SceneConfig.background_proposals_per_image must be >= 0")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ValueError("SceneConfig.objects_per_image must satisfy 1 <= min <= max")
        if not 0.0 <= self.confuser_rate <= 1.0:
            raise ValueError("SceneConfig.confuser_rate must lie in [0, 1]")
        if self.feature_noise_scale <= 0:
            raise ValueError("SceneConfig.feature_noise_scale must be positive")
        if self.class_feature_means is not None:
            means = np.asarray(self.class_feature_means, dtype=float)
            if means.shape != (self.classes, self.feature_dim):
                raise ValueError(
                    f"class_feature_means must be {self.classes}x{self.feature_dim}, "
                    f"got {means.shape}"
                )

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ImageLatents:
    object_features: np.ndarray  # (n_objects, d)
    background_features: np.ndarray  # (n_proposals, d)
    is_confuser: np.ndarray  # (n_proposals,)
    confuser_class: np.ndarray  # (n_proposals,), -1 for plain clutter


@dataclass
class SceneLatents:
    config: SceneConfig
    class_means: np.ndarray
    confuser_signatures: np.ndarray
    images: Dict[str, ImageLatents] = field(default_factory=dict)


def class_geometry(cfg: SceneConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Class means and confuser signatures; a function of ``cfg.seed`` only,
    so train and test splits built from the same config share them."""
    rng = np.random.default_rng([cfg.seed, 0x5CE])
    raw = rng.standard_normal((2 * cfg.classes, cfg.feature_dim))
    if 2 * cfg.classes <= cfg.feature_dim:
        q, _ = np.linalg.qr(raw.T)
        raw = q.T[: 2 * cfg.classes]
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    means = raw[: cfg.classes] * cfg.class_mean_norm
    signatures = raw[cfg.classes :] * cfg.confuser_signature_norm
    if cfg.class_feature_means is not None:
        means = np.asarray(cfg.class_feature_means, dtype=float)
    return means, signatures


def _box_at_iou(box: np.ndarray, target: float, rng: np.random.Generator) -> np.ndarray:
    """Shift ``box`` along a random direction so its IoU with the original
    equals ``target`` (before any clipping)."""
    w, h = box[2] - box[0], box[3] - box[1]
    theta = rng.uniform(0, 2 * np.pi)
    cx, cy = abs(np.cos(theta)), abs(np.sin(theta))
    # overlap fraction q satisfies IoU = q / (2 - q); q = (1 - t cx)(1 - t cy)
    q = 2 * target / (1 + target)
    if cx * cy < 1e-9:
        t = (1 - q) / max(cx, cy)
    else:
        # cx cy t^2 - (cx + cy) t + (1 - q) = 0, smaller root
        disc = (cx + cy) ** 2 - 4 * cx * cy * (1 - q)
        t = ((cx + cy) - np.sqrt(max(disc, 0.0))) / (2 * cx * cy)
    dx = np.sign(np.cos(theta)) * t * cx * w
    dy = np.sign(np.sin(theta)) * t * cy * h
    return box + np.array([dx, dy, dx, dy])


def _clip(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = boxes.copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, height)
    return out


def generate_scenes(cfg: SceneConfig, split_seed: Optional[int] = None) -> Tuple[Dataset, SceneLatents]:
    """Draw a synthetic dataset and the latents needed to featurize it.

    ``split_seed`` selects an independent split that shares the class
    geometry of ``cfg`` (defaults to ``cfg.seed``).
    """
    means, signatures = class_geometry(cfg)
    seed = cfg.seed if split_seed is None else split_seed
    rng = np.random.default_rng([cfg.seed, seed, 0x1A7])
    width, height = cfg.image_size
    d = cfg.feature_dim
    sigma = cfg.feature_noise_scale
    latents = SceneLatents(cfg, means, signatures)
    images = []
    for n in range(cfg.n_images):
        image_id = f"{seed:06d}_{n:05d}"
        n_obj = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
        classes = rng.integers(cfg.classes, size=n_obj)
        scale = rng.uniform(*cfg.object_scale, size=(n_obj, 2)) * [width, height]
        corner = rng.uniform(0, 1, size=(n_obj, 2)) * ([width, height] - scale)
        obj_boxes = np.hstack([corner, corner + scale])
        obj_feats = means[classes] + sigma * rng.standard_normal((n_obj, d))

        props = []
        for k in range(n_obj):
            targets = rng.uniform(0, 1, size=cfg.proposals_per_object)
            for t in targets:
                b = _box_at_iou(obj_boxes[k], t, rng)
                jitter = cfg.proposal_jitter * rng.standard_normal(4) * np.tile(scale[k], 2)
                props.append(b + jitter)
        n_bg = cfg.background_proposals_per_image
        bg_scale = rng.uniform(*cfg.object_scale, size=(n_bg, 2)) * [width, height]
        bg_corner = rng.uniform(0, 1, size=(n_bg, 2)) * ([width, height] - bg_scale)
        props.extend(np.hstack([bg_corner, bg_corner + bg_scale]))
        prop_boxes = _clip(as_array(props), width, height)
        # degenerate after clipping: nudge into a 1-pixel box
        bad = (prop_boxes[:, 2] <= prop_boxes[:, 0]) | (prop_boxes[:, 3] <= prop_boxes[:, 1])
        prop_boxes[bad, 2] = np.minimum(prop_boxes[bad, 0] + 1, width)
        prop_boxes[bad, 0] = prop_boxes[bad, 2] - 1
        prop_boxes[bad, 3] = np.minimum(prop_boxes[bad, 1] + 1, height)
        prop_boxes[bad, 1] = prop_boxes[bad, 3] - 1

        n_prop = len(prop_boxes)
        is_bg_prop = np.arange(n_prop) >= n_obj * cfg.proposals_per_object
        is_confuser = is_bg_prop & (rng.random(n_prop) < cfg.confuser_rate)
        confuser_class = np.where(is_confuser, rng.integers(cfg.classes, size=n_prop), -1)
        bg_feats = sigma * rng.standard_normal((n_prop, d))
        cc = confuser_class[is_confuser]
        bg_feats[is_confuser] += means[cc] + signatures[cc]

        true_iou = iou_matrix(prop_boxes, obj_boxes).max(axis=1)
        objectness = np.clip(true_iou + 0.1 * rng.standard_normal(n_prop), 0, 1)

        anns = tuple(
            Annotation(Box(*map(float, obj_boxes[k])), int(classes[k])) for k in range(n_obj)
        )
        proposals = tuple(
            Proposal(Box(*map(float, prop_boxes[i])), float(objectness[i])) for i in range(n_prop)
        )
        images.append(ImageRecord(image_id, width, height, anns, proposals))
        latents.images[image_id] = ImageLatents(obj_feats, bg_feats, is_confuser, confuser_class)

    names = {c: f"class_{c}" for c in range(cfg.classes)}
    return Dataset(tuple(images), names, provenance="synthetic"), latents


class NotSyntheticError(ValueError):
    """The dataset does not match the latents it is paired with."""


def roi_features(ds: Dataset, latents: SceneLatents) -> Dict[str, np.ndarray]:
    """Per-image ``(n_proposals, d)`` RoI feature arrays.

    Row ``i`` is ``o * f_obj + (1 - o) * f_bg`` where ``o`` is the proposal's
    best IoU against all objects (dropped ones included), ``f_obj`` that
    object's latent feature and ``f_bg`` the proposal's background feature.
    """
    out = {}
    for im in ds.images:
        lat = latents.images.get(im.image_id)
        n_prop = len(im.proposals or ())
        if lat is None or len(lat.object_features) != len(im.annotations) or len(
            lat.background_features
        ) != n_prop:
            raise NotSyntheticError(
                f"image {im.image_id!r} was not produced by generate_scenes with these latents"
            )
        ious = iou_matrix(im.proposal_array(), [a.box for a in im.annotations])
        best = ious.argmax(axis=1)
        o = ious[np.arange(n_prop), best][:, None]
        out[im.image_id] = o * lat.object_features[best] + (1 - o) * lat.background_features
    return out
