"""Axis-aligned box arithmetic.

Boxes use continuous pixel coordinates ``(x_min, y_min, x_max, y_max)``.
There is no ``+1`` pixel convention: a box from 0 to 10 has width 10.
Converters for integer-pixel formats (PASCAL VOC) live in
:mod:`softsample.curation`.

Zero-area boxes are legal and have IoU 0 with everything.
"""

from __future__ import annotations

from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np


class Box(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def is_valid(self) -> bool:
        return bool(
            np.all(np.isfinite(self)) and self.x_min <= self.x_max and self.y_min <= self.y_max
        )

    def clamp(self, width: float, height: float) -> "Box":
        """Clip the box to ``[0, width] x [0, height]``."""
        x0 = min(max(self.x_min, 0.0), width)
        y0 = min(max(self.y_min, 0.0), height)
        x1 = min(max(self.x_max, x0), width)
        y1 = min(max(self.y_max, y0), height)
        return Box(float(x0), float(y0), float(x1), float(y1))


def validate_box(box: Sequence[float]) -> Box:
    """Return ``box`` as a :class:`Box`, raising ``ValueError`` if malformed."""
    if len(box) != 4:
        raise ValueError(f"box must have 4 coordinates, got {len(box)}")
    b = Box(*(float(v) for v in box))
    if not b.is_valid():
        raise ValueError(f"invalid box {list(b)}: need finite x_min <= x_max, y_min <= y_max")
    return b


def as_array(boxes) -> np.ndarray:
    """Stack boxes into an ``(N, 4)`` float64 array (``(0, 4)`` when empty)."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return arr.reshape(-1, 4)


def iou(a: Box, b: Box) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def iou_matrix(proposals, gts) -> np.ndarray:
    """Pairwise IoU between two box sets.

    Args:
        proposals: ``N`` boxes (sequence of :class:`Box` or ``(N, 4)`` array).
        gts: ``M`` boxes.

    Returns:
        ``(N, M)`` array with entry ``(i, j) = iou(proposals[i], gts[j])``.
    """
    p = as_array(proposals)
    g = as_array(gts)
    if len(p) == 0 or len(g) == 0:
        return np.zeros((len(p), len(g)), dtype=np.float64)

    area_p = (p[:, 2] - p[:, 0]) * (p[:, 3] - p[:, 1])
    area_g = (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
    iw = np.minimum(p[:, None, 2], g[None, :, 2]) - np.maximum(p[:, None, 0], g[None, :, 0])
    ih = np.minimum(p[:, None, 3], g[None, :, 3]) - np.maximum(p[:, None, 1], g[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_p[:, None] + area_g[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=(inter > 0) & (union > 0))
    return out


def max_overlap(proposal: Box, gts: Sequence[Box]) -> Tuple[float, Optional[int]]:
    """Best IoU of ``proposal`` against ``gts`` and the index achieving it.

    Ties resolve to the lowest index. Returns ``(0.0, None)`` for empty ``gts``.
    """
    if len(gts) == 0:
        return 0.0, None
    row = iou_matrix([proposal], gts)[0]
    j = int(np.argmax(row))
    return float(row[j]), j
