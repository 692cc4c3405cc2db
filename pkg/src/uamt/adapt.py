"""Two-stage source-free adaptation.

Stage one generates pseudo-labels iteratively: the source model labels
the target set, a fresh copy of the source model is trained on those
labels, relabels the set at the next confidence threshold, and so on.
Stage two trains a student/teacher pair from the source weights; the
teacher follows the student by EMA and scores every ROI with
Monte-Carlo dropout, and losses on high-variance ROIs are down-weighted
by the inverse-variance weight C = clip(1/var, 1e-5, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import detector as det
from .detector import GridSpec, TrainingStepError
from .geometry import BBox, Detection
from .nn import AdamState, ParamSet, adam_step, ema_update
from .rng import RngStream
from .scenegen import PointScene, global_augment, random_object_scaling
from .tape import Tensor

DEFAULT_SETTINGS = det.DetectorSettings()


class StageError(RuntimeError):
    """A pipeline stage could not proceed (e.g. a round produced no labels)."""


@dataclass(frozen=True)
class AdaptConfig:
    delta_schedule: tuple[float, ...] = (0.1, 0.6, 0.8)
    iterations: int = 3  # J, pseudo-label refinement rounds
    mc_passes: int = 15  # T, teacher dropout passes
    alpha: float = 0.999  # EMA keep ratio
    epochs: int = 50  # mean-teacher epochs
    source_epochs: int = 50
    pseudo_epochs: int = 10  # per refinement round
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    use_uncertainty: bool = True
    weight_teacher_loss: bool = True
    per_epoch_ema: bool = False
    student_dropout: bool = True
    object_scale_range: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        if not self.delta_schedule or not all(0 < d < 1 for d in self.delta_schedule):
            raise ValueError("every confidence threshold must lie in (0, 1)")
        if self.iterations < 0:
            raise ValueError("iteration count must be >= 0")
        if self.mc_passes < 2:
            raise ValueError("sample variance needs at least 2 MC passes")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("EMA keep ratio must lie in [0, 1]")

    def delta_for_round(self, j: int) -> float:
        return self.delta_schedule[min(j, len(self.delta_schedule) - 1)]


@dataclass
class PseudoLabelSet:
    iteration: int
    threshold_used: float
    labels: dict[str, list[Detection]]

    def total(self) -> int:
        return sum(len(v) for v in self.labels.values())


@dataclass
class TeacherStats:
    mean_logit: np.ndarray
    variance: np.ndarray
    weight: np.ndarray
    pseudo_prob: np.ndarray


def uncertainty_weight(variance: float) -> float:
    """C = clip(1/variance, 1e-5, 1); zero variance maps to 1."""
    if variance < 0:
        raise AssertionError(f"negative variance {variance}")
    if variance <= 1.0:
        return 1.0
    return max(1.0 / variance, 1e-5)


def _uncertainty_weights(variances: np.ndarray) -> np.ndarray:
    out = np.ones_like(variances)
    high = variances > 1.0
    out[high] = np.maximum(1.0 / variances[high], 1e-5)
    return out


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


# -- inference ------------------------------------------------------------------


def infer_scene(
    params: ParamSet,
    scene: PointScene,
    spec: GridSpec,
    settings: det.DetectorSettings = None,
) -> list[Detection]:
    """Full deterministic inference: RPN -> decode -> NMS -> ROI confidence."""
    settings = settings or DEFAULT_SETTINGS
    grid = det.rasterize_bev(scene.points, spec)
    rpn, features, extras = det.rpn_forward(grid, params)
    proposals, _ = det.decode_boxes(rpn, spec, top=settings.pre_nms_top)
    proposals = det.nms(proposals, settings.nms_iou, settings.nms_top_k)
    if not proposals:
        return []
    logits, kept, _skipped = det.roi_forward(
        features, proposals, extras["tensors"], spec,
        dropout_enabled=False, stream=RngStream(0),
    )
    conf = _sigmoid(logits.data)
    return [
        Detection(proposals[i].box, float(c), float(z))
        for i, c, z in zip(kept, conf, logits.data)
    ]


def infer_pseudo_labels(
    params: ParamSet,
    scenes: list[PointScene],
    delta: float,
    spec: GridSpec,
    iteration: int = 0,
    settings: det.DetectorSettings = None,
) -> PseudoLabelSet:
    """Label every scene and keep detections with confidence >= delta."""
    if not 0 < delta < 1:
        raise ValueError("threshold must lie in (0, 1)")
    labels = {}
    for scene in scenes:
        dets = infer_scene(params, scene, spec, settings)
        labels[scene.scene_id] = [d for d in dets if d.confidence >= delta]
    return PseudoLabelSet(iteration, delta, labels)


# -- supervised / pseudo-supervised training -------------------------------------

ROI_NEG_RATIO = 3  # negatives kept per positive in the supervised ROI loss


def _balanced_roi_weights(
    targets: np.ndarray, proposal_conf: np.ndarray
) -> tuple[np.ndarray, int]:
    """Class-balanced ROI selection for supervised training.

    Sparse label sets make negatives dominate the ROI loss and drag every
    ROI score down, so the valid set keeps all positives plus at most
    ``ROI_NEG_RATIO`` hardest negatives (highest proposal confidence) per
    positive.  Dropped negatives get the minimum admissible weight, which
    is negligible; returns (weights, number of selected ROIs).
    """
    n = targets.size
    pos = targets >= 0.5
    n_pos = int(pos.sum())
    budget = ROI_NEG_RATIO * max(n_pos, 1)
    neg_idx = np.flatnonzero(~pos)
    weights = np.ones(n)
    if neg_idx.size > budget:
        order = neg_idx[np.argsort(-proposal_conf[neg_idx], kind="stable")]
        weights[order[budget:]] = 1e-5
    n_sel = n_pos + min(neg_idx.size, budget)
    return weights, max(n_sel, 1)


def _scene_loss_components(
    tensors: dict[str, Tensor],
    scene: PointScene,
    boxes: list[BBox],
    spec: GridSpec,
    dropout_enabled: bool,
    stream: RngStream,
    settings: det.DetectorSettings = None,
) -> dict[str, Tensor]:
    """The four base loss terms for one scene (teacher term zero)."""
    settings = settings or DEFAULT_SETTINGS
    grid = det.rasterize_bev(scene.points, spec)
    features = det.backbone_forward(grid, tensors)
    heads = det.rpn_heads(features, tensors)
    tg = det.assign_targets(spec, boxes)
    rpn_cls, _ = det.focal_loss(
        heads["cls"], tg["cls_targets"], tg["valid_mask"],
        settings.focal_gamma, settings.focal_alpha,
    )
    rpn_reg, _ = det.smooth_l1(
        heads["reg"], tg["reg_targets"], tg["pos_mask"], settings.smooth_l1_beta
    )
    rpn_dir, _ = det.dir_ce_loss(heads["dir"], tg["dir_targets"], tg["pos_mask"])

    rpn_out = det.RpnOutput(heads["cls"].data[0], heads["dir"].data[0], heads["reg"].data)
    proposals, _ = det.decode_boxes(rpn_out, spec, top=settings.pre_nms_top)
    proposals = det.nms(proposals, settings.nms_iou, settings.nms_top_k)
    if proposals:
        logits, kept, _ = det.roi_forward(
            features, proposals, tensors, spec, dropout_enabled, stream
        )
        targets = det.roi_targets_from_boxes(
            [proposals[i] for i in kept], boxes, settings.roi_target_iou
        )
        weights, n_sel = _balanced_roi_weights(
            np.asarray(targets, dtype=np.float64),
            np.array([proposals[i].confidence for i in kept]),
        )
        roi_cls, _ = det.roi_bce_loss(logits, targets, weights)
        roi_cls = roi_cls * (len(kept) / n_sel)
    else:
        roi_cls = Tensor(0.0)
    return {
        "rpn_cls": rpn_cls,
        "rpn_reg": rpn_reg,
        "rpn_dir": rpn_dir,
        "roi_cls_unc": roi_cls,
        "roi_tea": Tensor(0.0),
    }


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield range(start, min(start + batch_size, n))


def train_detector(
    scenes: list[PointScene],
    labels_by_id: dict[str, list[BBox]],
    init: ParamSet,
    cfg: AdaptConfig,
    spec: GridSpec,
    stream: RngStream,
    epochs: int,
    augment: bool,
    settings: det.DetectorSettings = None,
) -> ParamSet:
    """Supervised (or pseudo-supervised) training of a single detector.

    Augmentations (per-object scaling + global scale/rotation) run only
    when `augment` is set; pseudo-label training keeps scene geometry
    fixed so labels match inference geometry.
    """
    missing = [s.scene_id for s in scenes if s.scene_id not in labels_by_id]
    if missing:
        raise StageError(f"missing labels for scenes: {missing[:3]}...")
    params = init.copy()
    state = AdamState.for_params(params)
    step = 0
    for epoch in range(epochs):
        order_gen = stream.child(epoch).generator()
        order = order_gen.permutation(len(scenes))
        for batch in _batches(len(scenes), cfg.batch_size):
            tensors = params.as_tensors()
            total = None
            for k in batch:
                idx = int(order[k])
                scene = scenes[idx]
                boxes = labels_by_id[scene.scene_id]
                sstream = stream.child(epoch).child(idx + 1)
                if augment:
                    labeled = PointScene(
                        scene.scene_id, scene.points, list(boxes), scene.domain_tag
                    )
                    labeled = random_object_scaling(
                        labeled, cfg.object_scale_range, sstream.child(1)
                    )
                    labeled = global_augment(labeled, sstream.child(2))
                    scene, boxes = labeled, labeled.gt_boxes
                comps = _scene_loss_components(
                    tensors, scene, boxes, spec,
                    cfg.student_dropout, sstream.child(3), settings,
                )
                try:
                    loss = det.total_loss(comps)
                except TrainingStepError as exc:
                    raise TrainingStepError(f"step {step}: {exc}") from exc
                total = loss if total is None else total + loss
            total = total / len(batch)
            total.backward()
            grads = ParamSet({
                k: t.grad if t.grad is not None else np.zeros_like(t.data)
                for k, t in tensors.items()
            })
            params = adam_step(params, grads, state, cfg.lr)
            step += 1
    return params


# -- iterative pseudo-label generation (stage one) --------------------------------


def iterative_pseudo_rounds(
    source: ParamSet,
    target_scenes: list[PointScene],
    cfg: AdaptConfig,
    spec: GridSpec,
    stream: RngStream,
    settings: det.DetectorSettings = None,
) -> tuple[list[PseudoLabelSet], list[ParamSet]]:
    """Run J refinement rounds.

    Returns (label sets for j = 0..J, models for j = 0..J) where model 0
    is the source model itself and model j was trained on labels j-1.
    """
    labels = [
        infer_pseudo_labels(
            source, target_scenes, cfg.delta_for_round(0), spec, 0, settings
        )
    ]
    models = [source.copy()]
    if labels[0].total() == 0:
        raise StageError("round 0 produced zero pseudo-labels (threshold too high?)")
    # Refinement rounds train without dropout: the next round thresholds the
    # retrained model's confidences, and dropout-trained ROI scores sag enough
    # to starve the high-threshold rounds of labels.
    round_cfg = replace(cfg, student_dropout=False)
    for j in range(1, cfg.iterations + 1):
        prev = labels[j - 1]
        boxes_by_id = {
            sid: [d.box for d in dets] for sid, dets in prev.labels.items()
        }
        model = train_detector(
            target_scenes, boxes_by_id, source, round_cfg, spec,
            stream.child(j), cfg.pseudo_epochs, augment=True, settings=settings,
        )
        lab = infer_pseudo_labels(
            model, target_scenes, cfg.delta_for_round(j), spec, j, settings
        )
        if lab.total() == 0:
            raise StageError(f"round {j} produced zero pseudo-labels")
        labels.append(lab)
        models.append(model)
    return labels, models


# -- uncertainty-aware mean teacher (stage two) ------------------------------------


def mc_teacher_predict(
    teacher: ParamSet,
    grid: det.Grid,
    proposals: list[Detection],
    spec: GridSpec,
    mc_passes: int,
    base_stream: RngStream,
) -> TeacherStats:
    """Monte-Carlo dropout statistics of the teacher ROI head.

    Proposals are fixed across the T passes so per-ROI statistics align;
    passes draw from independent child streams and may run in any order.
    """
    if mc_passes < 2:
        raise ValueError("sample variance needs at least 2 MC passes")
    tensors = teacher.as_tensors()
    features = det.backbone_forward(grid, tensors)
    samples = []
    for t_idx in range(mc_passes):
        logits, kept, _ = det.roi_forward(
            features, proposals, tensors, spec,
            dropout_enabled=True, stream=base_stream.child(t_idx),
        )
        samples.append(logits.data)
    stacked = np.stack(samples)  # (T, n)
    mean = stacked.sum(axis=0) / mc_passes
    variance = ((stacked - mean) ** 2).sum(axis=0) / (mc_passes - 1)
    return TeacherStats(
        mean_logit=mean,
        variance=variance,
        weight=_uncertainty_weights(variance),
        pseudo_prob=_sigmoid(mean),
    )


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    snapshots: dict[str, list[dict]] = field(default_factory=dict)
    student_trajectory: list[ParamSet] | None = None


def mean_teacher_train(
    source: ParamSet,
    scenes: list[PointScene],
    labels: PseudoLabelSet,
    cfg: AdaptConfig,
    spec: GridSpec,
    stream: RngStream,
    record_trajectory: bool = False,
    settings: det.DetectorSettings = None,
) -> tuple[ParamSet, ParamSet, TrainLog]:
    """Train the student against pseudo-labels and the MC-dropout teacher.

    Per batch: student RPN proposals are shared with the teacher, the
    teacher's T dropout passes give per-ROI mean/variance, and both ROI
    loss terms are weighted by C.  Only the student takes gradient
    steps; the teacher follows by EMA (per batch, or per epoch with
    cfg.per_epoch_ema).
    """
    settings = settings or DEFAULT_SETTINGS
    uncovered = [s.scene_id for s in scenes if s.scene_id not in labels.labels]
    if uncovered:
        raise StageError(f"pseudo-labels missing for scenes: {uncovered[:3]}...")
    student = source.copy()
    teacher = source.copy()
    state = AdamState.for_params(student)
    log = TrainLog()
    if record_trajectory:
        log.student_trajectory = []
    step = 0
    for epoch in range(cfg.epochs):
        snapshot_tag = (
            "initial" if epoch == 0 else "final" if epoch == cfg.epochs - 1 else None
        )
        if snapshot_tag:
            log.snapshots.setdefault(snapshot_tag, [])
        order = stream.child(epoch).generator().permutation(len(scenes))
        epoch_terms: dict[str, list] = {k: [] for k in det.LOSS_TERMS}
        epoch_c, epoch_clip = [], []
        for batch in _batches(len(scenes), cfg.batch_size):
            tensors = student.as_tensors()
            total = None
            batch_c, batch_clip = [], []
            for k in batch:
                idx = int(order[k])
                scene = scenes[idx]
                pseudo_boxes = [d.box for d in labels.labels[scene.scene_id]]
                sstream = stream.child(epoch).child(idx + 1)
                grid = det.rasterize_bev(scene.points, spec)
                features = det.backbone_forward(grid, tensors)
                heads = det.rpn_heads(features, tensors)
                tg = det.assign_targets(spec, pseudo_boxes)
                rpn_cls, _ = det.focal_loss(
                    heads["cls"], tg["cls_targets"], tg["valid_mask"],
                    settings.focal_gamma, settings.focal_alpha,
                )
                rpn_reg, _ = det.smooth_l1(
                    heads["reg"], tg["reg_targets"], tg["pos_mask"],
                    settings.smooth_l1_beta,
                )
                rpn_dir, _ = det.dir_ce_loss(
                    heads["dir"], tg["dir_targets"], tg["pos_mask"]
                )
                rpn_out = det.RpnOutput(
                    heads["cls"].data[0], heads["dir"].data[0], heads["reg"].data
                )
                proposals, _ = det.decode_boxes(rpn_out, spec, top=settings.pre_nms_top)
                proposals = det.nms(proposals, settings.nms_iou, settings.nms_top_k)
                roi_unc, roi_tea = Tensor(0.0), Tensor(0.0)
                if proposals:
                    logits, kept, _ = det.roi_forward(
                        features, proposals, tensors, spec,
                        cfg.student_dropout, sstream.child(3),
                    )
                    kept_props = [proposals[i] for i in kept]
                    stats = mc_teacher_predict(
                        teacher, grid, kept_props, spec,
                        cfg.mc_passes, sstream.child(4),
                    )
                    weights = (
                        stats.weight
                        if cfg.use_uncertainty
                        else np.ones_like(stats.weight)
                    )
                    tea_weights = weights if cfg.weight_teacher_loss else np.ones_like(weights)
                    pseudo_targets = det.roi_targets_from_boxes(
                        kept_props, pseudo_boxes, settings.roi_target_iou
                    )
                    roi_unc, _ = det.roi_bce_loss(logits, pseudo_targets, weights)
                    roi_tea, _ = det.roi_bce_loss(
                        logits, stats.pseudo_prob, tea_weights
                    )
                    batch_c.extend(stats.weight.tolist())
                    batch_clip.extend((stats.weight <= 1e-5 + 1e-12).tolist())
                    if snapshot_tag:
                        for p, tgt, var in zip(
                            kept_props, pseudo_targets, stats.variance
                        ):
                            log.snapshots[snapshot_tag].append(
                                {
                                    "scene_id": scene.scene_id,
                                    "box": p.box,
                                    "pseudo_target": float(tgt),
                                    "variance": float(var),
                                }
                            )
                comps = {
                    "rpn_cls": rpn_cls,
                    "rpn_reg": rpn_reg,
                    "rpn_dir": rpn_dir,
                    "roi_cls_unc": roi_unc,
                    "roi_tea": roi_tea,
                }
                try:
                    loss = det.total_loss(comps)
                except TrainingStepError as exc:
                    raise TrainingStepError(f"epoch {epoch} step {step}: {exc}") from exc
                for name in det.LOSS_TERMS:
                    epoch_terms[name].append(float(comps[name].data))
                total = loss if total is None else total + loss
            total = total / len(batch)
            total.backward()
            grads = ParamSet({
                k: t.grad if t.grad is not None else np.zeros_like(t.data)
                for k, t in tensors.items()
            })
            student = adam_step(student, grads, state, cfg.lr)
            if record_trajectory:
                log.student_trajectory.append(student.copy())
            if not cfg.per_epoch_ema:
                teacher = ema_update(teacher, student, cfg.alpha)
            epoch_c.extend(batch_c)
            epoch_clip.extend(batch_clip)
            log.steps.append(
                {
                    "epoch": epoch,
                    "step": step,
                    **{k: float(np.mean(epoch_terms[k][-len(batch):])) for k in det.LOSS_TERMS},
                    "mean_C": float(np.mean(batch_c)) if batch_c else 1.0,
                    "frac_lower_clip": float(np.mean(batch_clip)) if batch_clip else 0.0,
                }
            )
            step += 1
        if cfg.per_epoch_ema:
            teacher = ema_update(teacher, student, cfg.alpha)
        log.epochs.append(
            {
                "epoch": epoch,
                **{k: float(np.mean(v)) if v else 0.0 for k, v in epoch_terms.items()},
                "mean_C": float(np.mean(epoch_c)) if epoch_c else 1.0,
                "frac_lower_clip": float(np.mean(epoch_clip)) if epoch_clip else 0.0,
            }
        )
    return student, teacher, log
