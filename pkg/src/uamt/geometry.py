"""BEV boxes, IoU, and non-maximum suppression.

Boxes are axis-aligned with an orientation bit instead of a free angle:
orient=0 puts the long side `l` along x, orient=1 along y.  The
"effective extents" below are the realized per-axis sizes after applying
that bit; all overlap math runs on effective extents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float  # short side, meters (w <= l by convention)
    l: float  # long side, meters
    orient: int  # 0: long axis along x, 1: long axis along y

    def extent_x(self) -> float:
        return self.l if self.orient == 0 else self.w

    def extent_y(self) -> float:
        return self.w if self.orient == 0 else self.l

    def area(self) -> float:
        return self.w * self.l

    def contains(self, x, y, dilation: float = 1.0):
        """Point-in-box test on effective extents; broadcasts over arrays."""
        hx = 0.5 * self.extent_x() * dilation
        hy = 0.5 * self.extent_y() * dilation
        return (np.abs(np.asarray(x) - self.cx) <= hx) & (
            np.abs(np.asarray(y) - self.cy) <= hy
        )


@dataclass(frozen=True)
class Detection:
    box: BBox
    confidence: float
    roi_logit: float = 0.0


def iou(a: BBox, b: BBox) -> float:
    ax, ay = a.extent_x(), a.extent_y()
    bx, by = b.extent_x(), b.extent_y()
    ix = min(a.cx + ax / 2, b.cx + bx / 2) - max(a.cx - ax / 2, b.cx - bx / 2)
    iy = min(a.cy + ay / 2, b.cy + by / 2) - max(a.cy - ay / 2, b.cy - by / 2)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area() + b.area() - inter)


def iou_matrix(boxes_a: list[BBox], boxes_b: list[BBox]) -> np.ndarray:
    """Pairwise IoU, vectorized over `boxes_b` for each box in `boxes_a`."""
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    bx = np.array([b.cx for b in boxes_b])
    by = np.array([b.cy for b in boxes_b])
    bex = np.array([b.extent_x() for b in boxes_b])
    bey = np.array([b.extent_y() for b in boxes_b])
    barea = np.array([b.area() for b in boxes_b])
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        ax, ay = a.extent_x(), a.extent_y()
        ix = np.minimum(a.cx + ax / 2, bx + bex / 2) - np.maximum(
            a.cx - ax / 2, bx - bex / 2
        )
        iy = np.minimum(a.cy + ay / 2, by + bey / 2) - np.maximum(
            a.cy - ay / 2, by - bey / 2
        )
        inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
        inter[(ix <= 0) | (iy <= 0)] = 0.0
        out[i] = inter / (a.area() + barea - inter)
    return out


def _det_sort_key(d: Detection):
    # Descending confidence, then ascending cx, then cy for stable ties.
    return (-d.confidence, d.box.cx, d.box.cy)


def nms(dets: list[Detection], iou_thresh: float, top_k: int) -> list[Detection]:
    """Greedy suppression of overlapping lower-confidence detections."""
    if not dets:
        return []
    order = sorted(dets, key=_det_sort_key)
    cx = np.array([d.box.cx for d in order])
    cy = np.array([d.box.cy for d in order])
    hx = np.array([d.box.extent_x() for d in order]) / 2
    hy = np.array([d.box.extent_y() for d in order]) / 2
    area = np.array([d.box.area() for d in order])
    alive = np.ones(len(order), dtype=bool)
    kept: list[int] = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(i)
        if len(kept) >= top_k:
            break
        ix = np.minimum(cx[i] + hx[i], cx + hx) - np.maximum(cx[i] - hx[i], cx - hx)
        iy = np.minimum(cy[i] + hy[i], cy + hy) - np.maximum(cy[i] - hy[i], cy - hy)
        inter = np.where((ix > 0) & (iy > 0), ix * iy, 0.0)
        overlaps = inter / (area[i] + area - inter)
        alive &= overlaps <= iou_thresh
        alive[i] = False
    return [order[i] for i in kept]
