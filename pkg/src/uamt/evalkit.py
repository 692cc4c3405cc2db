"""KITTI-style matching, interpolated AP, difficulty tiers, and the
diagnostic reports (confidence density, variance shift, AP-per-iteration)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox, Detection, iou_matrix
from .scenegen import PointScene

TIERS = ("Easy", "Moderate", "Hard")

# Tier thresholds: points-in-box count proxies occlusion, range proxies
# distance.  Tiers are cumulative (Easy subset of Moderate subset of Hard).
EASY_MIN_POINTS = 40
EASY_MAX_RANGE = 8.0
MODERATE_MIN_POINTS = 15
HARD_MIN_POINTS = 5


def difficulty_bin(gt: BBox, scene: PointScene) -> str:
    """'Easy' | 'Moderate' | 'Hard' | 'ignored' for one ground-truth box."""
    pts = scene.points
    n = int(gt.contains(pts[:, 0], pts[:, 1]).sum()) if len(pts) else 0
    r = float(np.hypot(gt.cx, gt.cy))
    if n >= EASY_MIN_POINTS and r < EASY_MAX_RANGE:
        return "Easy"
    if n >= MODERATE_MIN_POINTS:
        return "Moderate"
    if n >= HARD_MIN_POINTS:
        return "Hard"
    return "ignored"


def _tier_includes(tier: str, label: str) -> bool:
    order = {"Easy": 0, "Moderate": 1, "Hard": 2}
    return label != "ignored" and order[label] <= order[tier]


def match_detections(
    dets: list[Detection], gts: list[BBox], iou_thresh: float
) -> tuple[list[bool], list[bool]]:
    """Greedy confidence-ordered matching.

    Returns (per-detection is_tp in the given order, per-GT matched).
    Each detection claims the unmatched GT of highest IoU >= thresh.
    """
    order = sorted(
        range(len(dets)),
        key=lambda i: (-dets[i].confidence, dets[i].box.cx, dets[i].box.cy),
    )
    is_tp = [False] * len(dets)
    matched = [False] * len(gts)
    if dets and gts:
        m = iou_matrix([d.box for d in dets], gts)
        for i in order:
            best, best_iou = -1, iou_thresh
            for g in range(len(gts)):
                if not matched[g] and m[i, g] >= best_iou:
                    best, best_iou = g, m[i, g]
            if best >= 0:
                matched[best] = True
                is_tp[i] = True
    return is_tp, matched


def average_precision(
    scored: list[tuple[float, bool]], n_gt: int, n_points: int = 40
) -> float:
    """Interpolated AP over `n_points` recall levels with precision envelope.

    `scored` is (confidence, is_tp) per counted detection over the dataset.
    """
    if n_gt <= 0:
        raise ValueError("AP undefined with zero ground truth")
    if not scored:
        return 0.0
    order = sorted(range(len(scored)), key=lambda i: (-scored[i][0], i))
    tp = np.cumsum([1.0 if scored[i][1] else 0.0 for i in order])
    fp = np.cumsum([0.0 if scored[i][1] else 1.0 for i in order])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    ap = 0.0
    for k in range(1, n_points + 1):
        r = k / n_points
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / n_points


@dataclass
class TierResult:
    ap: float | None  # None when the tier has no ground truth
    tp: int = 0
    fp: int = 0
    fn: int = 0
    n_gt: int = 0


@dataclass
class EvalReport:
    iou_thresh: float
    tiers: dict[str, TierResult] = field(default_factory=dict)

    def moderate_ap(self) -> float | None:
        return self.tiers["Moderate"].ap


def evaluate(
    detections: dict[str, list[Detection]],
    scenes: list[PointScene],
    iou_thresh: float = 0.7,
    n_points: int = 40,
) -> EvalReport:
    """Dataset-level AP per difficulty tier.

    GT outside a tier (or 'ignored') is don't-care for that tier:
    detections matched to it are neither TP nor FP.
    """
    report = EvalReport(iou_thresh=iou_thresh)
    per_scene = []
    for scene in scenes:
        dets = detections.get(scene.scene_id, [])
        labels = [difficulty_bin(g, scene) for g in scene.gt_boxes]
        match_of = _match_assignment(dets, scene.gt_boxes, iou_thresh)
        per_scene.append((dets, labels, match_of))
    for tier in TIERS:
        scored: list[tuple[float, bool]] = []
        n_gt = tp = fp = fn = 0
        for dets, labels, match_of in per_scene:
            counted = [_tier_includes(tier, lab) for lab in labels]
            n_gt += sum(counted)
            matched_counted = set()
            for i, det in enumerate(dets):
                g = match_of[i]
                if g is not None and counted[g]:
                    scored.append((det.confidence, True))
                    tp += 1
                    matched_counted.add(g)
                elif g is None:
                    scored.append((det.confidence, False))
                    fp += 1
                # matched to a don't-care GT: excluded entirely
            fn += sum(counted) - len(matched_counted)
        if n_gt == 0:
            report.tiers[tier] = TierResult(ap=None)
        else:
            ap = average_precision(scored, n_gt, n_points)
            report.tiers[tier] = TierResult(ap=ap, tp=tp, fp=fp, fn=fn, n_gt=n_gt)
    return report


def _match_assignment(dets, gts, iou_thresh):
    """Per-detection matched GT index (or None), greedy by confidence."""
    order = sorted(
        range(len(dets)),
        key=lambda i: (-dets[i].confidence, dets[i].box.cx, dets[i].box.cy),
    )
    match_of: list[int | None] = [None] * len(dets)
    taken = [False] * len(gts)
    if dets and gts:
        m = iou_matrix([d.box for d in dets], gts)
        for i in order:
            best, best_iou = -1, iou_thresh
            for g in range(len(gts)):
                if not taken[g] and m[i, g] >= best_iou:
                    best, best_iou = g, m[i, g]
            if best >= 0:
                taken[best] = True
                match_of[i] = best
    return match_of


# -- diagnostic reports -------------------------------------------------------


def confidence_density_report(
    label_sets: dict[int, dict[str, list[Detection]]],
    labeled_scenes: list[PointScene],
    correctness_iou: float = 0.5,
    n_bins: int = 20,
) -> dict[int, dict]:
    """Per-iteration confidence histograms of correct vs incorrect labels.

    A pseudo-label is correct when its IoU with some ground-truth box of
    the labeled analysis copy is >= `correctness_iou`.
    """
    gt_by_id = {s.scene_id: s.gt_boxes for s in labeled_scenes}
    if not gt_by_id:
        raise ValueError("confidence density report requires labeled scenes")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    out = {}
    for j, per_scene in sorted(label_sets.items()):
        conf_correct, conf_wrong = [], []
        for scene_id, dets in per_scene.items():
            gts = gt_by_id.get(scene_id, [])
            if dets:
                if gts:
                    best = iou_matrix([d.box for d in dets], gts).max(axis=1)
                else:
                    best = np.zeros(len(dets))
                for d, b in zip(dets, best):
                    (conf_correct if b >= correctness_iou else conf_wrong).append(
                        d.confidence
                    )
        hist_c, _ = np.histogram(conf_correct, bins=edges)
        hist_w, _ = np.histogram(conf_wrong, bins=edges)
        wrong = np.array(conf_wrong)
        out[j] = {
            "bin_edges": edges,
            "correct_hist": hist_c,
            "incorrect_hist": hist_w,
            "n_correct": len(conf_correct),
            "n_incorrect": len(conf_wrong),
            "mean_incorrect_confidence": float(wrong.mean()) if len(wrong) else None,
            "frac_incorrect_above_0p8": float((wrong > 0.8).mean())
            if len(wrong)
            else None,
        }
    return out


def variance_report(
    snapshots: dict[str, list[dict]],
    labeled_scenes: list[PointScene],
    correctness_iou: float = 0.5,
    n_bins: int = 20,
) -> dict[str, dict]:
    """Teacher-variance histograms over incorrectly pseudo-labeled ROIs.

    `snapshots` maps an epoch tag to per-ROI records with keys
    scene_id, box (BBox), pseudo_target (0/1), variance.  An ROI is
    incorrect when its pseudo target disagrees with the ground truth
    (IoU >= `correctness_iou` with any GT box).
    """
    if not snapshots:
        raise ValueError("variance report requires training snapshots")
    gt_by_id = {s.scene_id: s.gt_boxes for s in labeled_scenes}
    out = {}
    for tag, rois in snapshots.items():
        wrong_vars = []
        for roi in rois:
            gts = gt_by_id.get(roi["scene_id"], [])
            if gts:
                best = iou_matrix([roi["box"]], gts)[0].max()
            else:
                best = 0.0
            true_label = 1.0 if best >= correctness_iou else 0.0
            if roi["pseudo_target"] != true_label:
                wrong_vars.append(roi["variance"])
        wrong = np.array(wrong_vars)
        if len(wrong):
            hist, edges = np.histogram(wrong, bins=n_bins)
        else:
            hist, edges = np.zeros(n_bins, dtype=int), np.linspace(0, 1, n_bins + 1)
        out[tag] = {
            "hist": hist,
            "bin_edges": edges,
            "n_incorrect": len(wrong),
            "median_variance": float(np.median(wrong)) if len(wrong) else None,
            "frac_low_variance": float((wrong < 1.0).mean()) if len(wrong) else None,
        }
    return out


def map_over_iterations(
    detections_per_iteration: dict[int, dict[str, list[Detection]]],
    scenes: list[PointScene],
    iou_thresh: float = 0.7,
) -> list[tuple[int, float | None]]:
    """Moderate-tier AP for each iteration's model output."""
    curve = []
    for j, dets in sorted(detections_per_iteration.items()):
        report = evaluate(dets, scenes, iou_thresh)
        curve.append((j, report.moderate_ap()))
    return curve
