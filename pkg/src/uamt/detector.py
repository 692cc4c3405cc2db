"""Micro BEV detector: rasterizer, conv backbone, RPN, ROI head, losses.

Architecture (fixed, small enough for finite-difference checks over the
whole network):

    raster (1ch) -> conv3x3 (1->8) -> relu -> conv3x3 (8->16) -> relu
                 -> 1x1 heads: cls (1), dir (1), reg (4)
    ROI head: 3x3 feature patch (144) -> dense 32 -> relu
                 -> dropout(0.5) -> dense 1 logit

One anchor per cell, sized (anchor_w, anchor_l) and centered in the cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BBox, Detection, iou_matrix, nms
from .nn import ConfigurationError, ParamSet, dropout_mask
from .rng import RngStream
from . import tape
from .tape import Tensor

ROI_DROPOUT_P = 0.5
ROI_HIDDEN = 32
BACKBONE_CHANNELS = (8, 16)


class TrainingStepError(RuntimeError):
    """Raised when a loss term becomes non-finite."""


@dataclass(frozen=True)
class DetectorSettings:
    """Loss constants and post-processing knobs (config-exposed)."""

    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    smooth_l1_beta: float = 1.0
    nms_iou: float = 0.3
    nms_top_k: int = 50
    pre_nms_top: int = 512
    roi_target_iou: float = 0.5


@dataclass(frozen=True)
class GridSpec:
    extent_x: float = 32.0
    extent_y: float = 32.0
    cells_x: int = 64
    cells_y: int = 64
    anchor_w: float = 2.0
    anchor_l: float = 4.0

    @property
    def cell_x(self) -> float:
        return self.extent_x / self.cells_x

    @property
    def cell_y(self) -> float:
        return self.extent_y / self.cells_y

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-center coordinates: xs (cells_x,), ys (cells_y,)."""
        xs = -self.extent_x / 2 + (np.arange(self.cells_x) + 0.5) * self.cell_x
        ys = -self.extent_y / 2 + (np.arange(self.cells_y) + 0.5) * self.cell_y
        return xs, ys

    def cell_of(self, x: float, y: float) -> tuple[int, int] | None:
        """(iy, ix) of the cell containing (x, y), or None if outside."""
        ix = math.floor((x + self.extent_x / 2) / self.cell_x)
        iy = math.floor((y + self.extent_y / 2) / self.cell_y)
        if 0 <= ix < self.cells_x and 0 <= iy < self.cells_y:
            return iy, ix
        return None


@dataclass
class Grid:
    """Channel-major feature map (channels, height, width)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ConfigurationError(f"grid must be 3-d, got {self.values.shape}")


@dataclass
class RpnOutput:
    cls_logit: np.ndarray  # (H, W)
    dir_logit: np.ndarray  # (H, W)
    reg: np.ndarray  # (4, H, W): dx, dy, dlogw, dlogl


def rasterize_bev(points: np.ndarray, spec: GridSpec) -> Grid:
    """Single-channel log(1 + count) occupancy raster; outside points ignored."""
    grid = np.zeros((1, spec.cells_y, spec.cells_x))
    if len(points):
        ix = np.floor((points[:, 0] + spec.extent_x / 2) / spec.cell_x).astype(int)
        iy = np.floor((points[:, 1] + spec.extent_y / 2) / spec.cell_y).astype(int)
        ok = (ix >= 0) & (ix < spec.cells_x) & (iy >= 0) & (iy < spec.cells_y)
        np.add.at(grid[0], (iy[ok], ix[ok]), 1.0)
    return Grid(np.log1p(grid))


def init_detector_params(spec: GridSpec, stream: RngStream) -> ParamSet:
    """He-normal weights, zero biases, fixed entry order."""
    gen = stream.generator()
    c1, c2 = BACKBONE_CHANNELS
    roi_in = c2 * 9

    def he(shape, fan_in):
        return gen.normal(0.0, math.sqrt(2.0 / fan_in), shape)

    p = ParamSet()
    p.add("backbone.conv1.w", he((c1, 1, 3, 3), 9))
    p.add("backbone.conv1.b", np.zeros(c1))
    p.add("backbone.conv2.w", he((c2, c1, 3, 3), 9 * c1))
    p.add("backbone.conv2.b", np.zeros(c2))
    p.add("rpn.cls.w", he((1, c2, 1, 1), c2))
    p.add("rpn.cls.b", np.zeros(1))
    p.add("rpn.dir.w", he((1, c2, 1, 1), c2))
    p.add("rpn.dir.b", np.zeros(1))
    p.add("rpn.reg.w", he((4, c2, 1, 1), c2))
    p.add("rpn.reg.b", np.zeros(4))
    p.add("roi.fc1.w", he((ROI_HIDDEN, roi_in), roi_in))
    p.add("roi.fc1.b", np.zeros(ROI_HIDDEN))
    p.add("roi.fc2.w", he((1, ROI_HIDDEN), ROI_HIDDEN))
    p.add("roi.fc2.b", np.zeros(1))
    return p


def backbone_forward(grid: Grid, t: dict[str, Tensor]) -> Tensor:
    x = Tensor(grid.values)
    x = tape.conv2d(x, t["backbone.conv1.w"], t["backbone.conv1.b"], pad=1).relu()
    x = tape.conv2d(x, t["backbone.conv2.w"], t["backbone.conv2.b"], pad=1).relu()
    return x


def rpn_heads(features: Tensor, t: dict[str, Tensor]) -> dict[str, Tensor]:
    cls = tape.conv2d(features, t["rpn.cls.w"], t["rpn.cls.b"], pad=0)
    dir_ = tape.conv2d(features, t["rpn.dir.w"], t["rpn.dir.b"], pad=0)
    reg = tape.conv2d(features, t["rpn.reg.w"], t["rpn.reg.b"], pad=0)
    return {"cls": cls, "dir": dir_, "reg": reg}


def rpn_forward(grid: Grid, params: ParamSet) -> tuple[RpnOutput, Tensor, dict]:
    """Deterministic RPN pass; returns the output, features, and head tensors."""
    for name in ("backbone.conv1.w", "rpn.cls.w", "rpn.reg.w", "rpn.dir.w"):
        if name not in params:
            raise ConfigurationError(f"missing parameter entry {name!r}")
    t = params.as_tensors()
    features = backbone_forward(grid, t)
    heads = rpn_heads(features, t)
    out = RpnOutput(
        cls_logit=heads["cls"].data[0],
        dir_logit=heads["dir"].data[0],
        reg=heads["reg"].data,
    )
    return out, features, {"tensors": t, "heads": heads}


def decode_boxes(
    rpn: RpnOutput, spec: GridSpec, top: int | None = None
) -> tuple[list[Detection], int]:
    """Anchor decoding; returns (detections, discarded-non-finite count).

    With `top`, only the `top` highest cls-logit cells are decoded (the
    remainder could never survive confidence-ranked NMS ahead of them).
    """
    xs, ys = spec.centers()
    H, W = rpn.cls_logit.shape
    flat_cls = rpn.cls_logit.reshape(-1)
    if top is not None and top < flat_cls.size:
        idx = np.argpartition(-flat_cls, top)[:top]
        idx = idx[np.argsort(-flat_cls[idx], kind="stable")]
    else:
        idx = np.argsort(-flat_cls, kind="stable")
    reg = rpn.reg.reshape(4, -1)[:, idx]
    finite = np.all(np.isfinite(reg), axis=0)
    discarded = int(np.sum(~finite))
    idx = idx[finite]
    reg = reg[:, finite]
    cx = xs[idx % W] + reg[0] * spec.cell_x
    cy = ys[idx // W] + reg[1] * spec.cell_y
    w = spec.anchor_w * np.exp(reg[2])
    l = spec.anchor_l * np.exp(reg[3])
    orient = (rpn.dir_logit.reshape(-1)[idx] > 0).astype(int)
    conf = 1.0 / (1.0 + np.exp(-flat_cls[idx]))
    dets = [
        Detection(BBox(cx[k], cy[k], w[k], l[k], int(orient[k])), float(conf[k]))
        for k in range(idx.size)
    ]
    return dets, discarded


def roi_forward(
    features: Tensor,
    proposals: list[Detection],
    t: dict[str, Tensor],
    spec: GridSpec,
    dropout_enabled: bool,
    stream: RngStream,
) -> tuple[Tensor, list[int], list[int]]:
    """ROI confidence logits for each proposal.

    Returns (logits (n,), kept proposal indices, skipped indices).
    Proposals whose center is outside the grid extent are skipped.
    Patch centers are clamped one cell inside the border so the 3x3 pool
    is always defined.
    """
    if not proposals:
        raise ConfigurationError("roi_forward requires at least one proposal")
    rows, cols, kept, skipped = [], [], [], []
    for i, det in enumerate(proposals):
        cell = spec.cell_of(det.box.cx, det.box.cy)
        if cell is None:
            skipped.append(i)
            continue
        iy, ix = cell
        rows.append(min(max(iy, 1), spec.cells_y - 2))
        cols.append(min(max(ix, 1), spec.cells_x - 2))
        kept.append(i)
    if not kept:
        return Tensor(np.zeros(0)), kept, skipped
    patches = tape.gather_patches(
        features, np.array(rows), np.array(cols), half=1
    )
    h = tape.dense(patches, t["roi.fc1.w"], t["roi.fc1.b"]).relu()
    mask, keep = dropout_mask(h.shape, ROI_DROPOUT_P, stream, dropout_enabled)
    h = tape.dropout_masked(h, mask, keep)
    logits = tape.dense(h, t["roi.fc2.w"], t["roi.fc2.b"])
    return logits.reshape(-1), kept, skipped


def assign_targets(spec: GridSpec, gts: list[BBox], dilation: float = 1.5):
    """Anchor targets for one scene.

    Returns dict with cls_targets, dir_targets (H, W), reg_targets
    (4, H, W), pos_mask, valid_mask (H, W).  An anchor is positive iff
    its cell center lies in a ground-truth box; centers only inside the
    `dilation`-scaled footprint are ignored (excluded from the
    classification loss).  Overlapping claims go to the box with the
    nearer center (ties to the smaller index).
    """
    xs, ys = spec.centers()
    H, W = spec.cells_y, spec.cells_x
    X, Y = np.meshgrid(xs, ys)
    cls_t = np.zeros((H, W))
    dir_t = np.zeros((H, W))
    reg_t = np.zeros((4, H, W))
    valid = np.ones((H, W), dtype=bool)
    pos = np.zeros((H, W), dtype=bool)
    if not gts:
        return {
            "cls_targets": cls_t,
            "dir_targets": dir_t,
            "reg_targets": reg_t,
            "pos_mask": pos,
            "valid_mask": valid,
        }
    inside = np.stack([g.contains(X, Y) for g in gts])  # (G, H, W)
    dilated = np.stack([g.contains(X, Y, dilation) for g in gts])
    dist = np.stack([(X - g.cx) ** 2 + (Y - g.cy) ** 2 for g in gts])
    dist_masked = np.where(inside, dist, np.inf)
    owner = np.argmin(dist_masked, axis=0)  # ties -> smaller index
    pos = inside.any(axis=0)
    ignore = dilated.any(axis=0) & ~pos
    valid = ~ignore
    cls_t[pos] = 1.0
    for gi, g in enumerate(gts):
        sel = pos & (owner == gi)
        if not sel.any():
            continue
        reg_t[0][sel] = (g.cx - X[sel]) / spec.cell_x
        reg_t[1][sel] = (g.cy - Y[sel]) / spec.cell_y
        reg_t[2][sel] = math.log(g.w / spec.anchor_w)
        reg_t[3][sel] = math.log(g.l / spec.anchor_l)
        dir_t[sel] = float(g.orient)
    return {
        "cls_targets": cls_t,
        "dir_targets": dir_t,
        "reg_targets": reg_t,
        "pos_mask": pos,
        "valid_mask": valid,
    }


# -- losses -------------------------------------------------------------------


def _bce_from_logits(z: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross entropy; `targets` may be soft in [0, 1]."""
    return z.softplus() - z * targets


def focal_loss(
    cls_logits: Tensor,
    cls_targets: np.ndarray,
    valid_mask: np.ndarray,
    gamma: float = 2.0,
    alpha_f: float = 0.25,
) -> tuple[Tensor, int]:
    """Sigmoid focal loss, mean over non-ignored anchors."""
    n = int(valid_mask.sum())
    if n == 0:
        return Tensor(0.0), 0
    z = cls_logits.reshape(-1)
    t = cls_targets.reshape(-1)
    v = valid_mask.reshape(-1).astype(np.float64)
    log_p = -((-z).softplus())
    log_1mp = -(z.softplus())
    log_pt = log_p * t + log_1mp * (1.0 - t)
    p = z.sigmoid()
    pt = p * t + (1.0 - p) * (1.0 - t)
    alpha_t = alpha_f * t + (1.0 - alpha_f) * (1.0 - t)
    elem = (1.0 - pt) ** gamma * log_pt * (-alpha_t)
    return (elem * v).sum() / n, n


def smooth_l1(
    reg_pred: Tensor,
    reg_target: np.ndarray,
    positive_mask: np.ndarray,
    beta: float = 1.0,
) -> tuple[Tensor, int]:
    """Mean smooth-L1 over positive anchors and all 4 regression components."""
    npos = int(positive_mask.sum())
    if npos == 0:
        return Tensor(0.0), 0
    mask = np.broadcast_to(positive_mask, reg_pred.shape).astype(np.float64)
    elem = tape.smooth_l1_elem(reg_pred - reg_target, beta)
    return (elem * mask).sum() / (4 * npos), npos


def dir_ce_loss(
    dir_logits: Tensor, dir_targets: np.ndarray, positive_mask: np.ndarray
) -> tuple[Tensor, int]:
    """Mean binary cross entropy on the orientation bit over positives."""
    npos = int(positive_mask.sum())
    if npos == 0:
        return Tensor(0.0), 0
    m = positive_mask.astype(np.float64)
    elem = _bce_from_logits(dir_logits, dir_targets)
    return (elem * m).sum() / npos, npos


def roi_bce_loss(
    roi_logits: Tensor, roi_targets: np.ndarray, weights: np.ndarray
) -> tuple[Tensor, int]:
    """(1/N) sum of per-ROI weighted BCE; N = number of valid ROIs."""
    n = int(roi_logits.data.size)
    if n == 0:
        return Tensor(0.0), 0
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ConfigurationError("weights length must match ROI count")
    if not np.all((weights >= 1e-5 - 1e-12) & (weights <= 1.0 + 1e-12)):
        raise ConfigurationError("ROI weights must lie in [1e-5, 1]")
    elem = _bce_from_logits(roi_logits, np.asarray(roi_targets, dtype=np.float64))
    return (elem * weights).sum() / n, n


LOSS_TERMS = ("rpn_cls", "rpn_reg", "rpn_dir", "roi_cls_unc", "roi_tea")


def total_loss(components: dict[str, Tensor]) -> Tensor:
    """Unweighted sum of the five loss terms; rejects non-finite terms."""
    total = None
    for name in LOSS_TERMS:
        term = components[name]
        if not np.isfinite(term.data):
            raise TrainingStepError(f"loss term {name!r} is not finite")
        total = term if total is None else total + term
    return total


def roi_targets_from_boxes(
    proposals: list[Detection], gts: list[BBox], iou_cut: float = 0.5
) -> np.ndarray:
    """1 for proposals overlapping a (pseudo-)ground-truth box at IoU >= cut."""
    if not proposals:
        return np.zeros(0)
    if not gts:
        return np.zeros(len(proposals))
    m = iou_matrix([d.box for d in proposals], gts)
    return (m.max(axis=1) >= iou_cut).astype(np.float64)
