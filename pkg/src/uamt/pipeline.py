"""Stage orchestration and on-disk artifacts.

Each stage reads its inputs from the run directory, verifies that they
were produced under the same resolved config (by hash), and writes its
outputs with that hash embedded, so stages are independently
re-runnable and a full run is bit-reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from . import adapt, evalkit
from .adapt import AdaptConfig, PseudoLabelSet, StageError
from .config import config_hash
from .detector import DetectorSettings, GridSpec, init_detector_params
from .geometry import BBox, Detection
from .nn import ParamSet, load_checkpoint, save_checkpoint
from .rng import RngStream
from .scenegen import (
    DomainConfig,
    PointScene,
    RainConfig,
    generate_dataset,
    read_dataset,
    write_dataset,
)


class ArtifactMismatch(RuntimeError):
    """Upstream artifact was produced under a different config."""


# -- config -> domain objects -------------------------------------------------


def grid_spec(config: dict) -> GridSpec:
    d = config["detector"]
    return GridSpec(
        extent_x=d["extent_x"], extent_y=d["extent_y"],
        cells_x=d["cells_x"], cells_y=d["cells_y"],
        anchor_w=d["anchor_w"], anchor_l=d["anchor_l"],
    )


def detector_settings(config: dict) -> DetectorSettings:
    d = config["detector"]
    return DetectorSettings(
        focal_gamma=d["focal_gamma"], focal_alpha=d["focal_alpha"],
        smooth_l1_beta=d["smooth_l1_beta"], nms_iou=d["nms_iou"],
        nms_top_k=d["nms_top_k"],
    )


def adapt_config(config: dict) -> AdaptConfig:
    a = config["adapt"]
    return AdaptConfig(
        delta_schedule=tuple(a["delta_schedule"]),
        iterations=a["iterations"],
        mc_passes=a["mc_passes"],
        alpha=a["alpha"],
        epochs=a["epochs"],
        source_epochs=a["source_epochs"],
        pseudo_epochs=a["pseudo_epochs"],
        batch_size=a["batch_size"],
        lr=a["lr"],
        seed=config["seed"],
        use_uncertainty=a["use_uncertainty"],
        weight_teacher_loss=a["weight_teacher_loss"],
        per_epoch_ema=a["per_epoch_ema"],
        student_dropout=a["student_dropout"],
        object_scale_range=tuple(a["object_scale_range"]),
    )


def domain_config(section: dict, name: str, det_cfg: dict) -> DomainConfig:
    return DomainConfig(
        name=name,
        extent_x=det_cfg["extent_x"],
        extent_y=det_cfg["extent_y"],
        n_objects=tuple(section["n_objects"]),
        object_w_mean=section["object_w_mean"],
        object_l_mean=section["object_l_mean"],
        object_size_sd=section["object_size_sd"],
        points_per_m2=section["points_per_m2"],
        clutter_points=tuple(section["clutter_points"]),
    )


def rain_config(config: dict) -> RainConfig | None:
    r = config["scenegen"]["rain"]
    if not r["enabled"]:
        return None
    return RainConfig(
        rate_range_mm_per_hr=tuple(r["rate_range_mm_per_hr"]),
        drop_coeff=r["drop_coeff"],
        noise_sd_per_m=r["noise_sd_per_m"],
    )


def generate_splits(config: dict) -> dict[str, list[PointScene]]:
    """All four splits, regenerated deterministically from (config, seed)."""
    sg = config["scenegen"]
    src = domain_config(sg["source"], "source", config["detector"])
    tgt = domain_config(sg["target"], "target", config["detector"])
    rain = rain_config(config)
    root = RngStream(config["seed"])
    return {
        "source_train": generate_dataset(src, sg["n_train"], root.child(1), None, "src_train"),
        "source_eval": generate_dataset(src, sg["n_eval"], root.child(2), None, "src_eval"),
        "target_train": generate_dataset(tgt, sg["n_train"], root.child(3), rain, "tgt_train"),
        "target_eval": generate_dataset(tgt, sg["n_eval"], root.child(4), rain, "tgt_eval"),
    }


# -- run directory layout ------------------------------------------------------


class RunDir:
    def __init__(self, out_dir, config: dict):
        self.root = Path(out_dir)
        self.config = config
        self.hash = config_hash(config)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_resolved_config(self):
        self.path("config.resolved.json").write_text(
            json.dumps({"config_hash": self.hash, "config": self.config}, indent=2)
        )

    # checkpoints carry a JSON sidecar with the resolved config + seed
    def save_params(self, name: str, params: ParamSet, stage: str):
        ckpt = self.path("ckpt", f"{name}.uamt")
        save_checkpoint(params, ckpt)
        meta = {
            "stage": stage,
            "seed": self.config["seed"],
            "config_hash": self.hash,
            "config": self.config,
            "checkpoint_sha256": _file_hash(ckpt),
        }
        self.path("ckpt", f"{name}.meta.json").write_text(json.dumps(meta, indent=2))
        return ckpt

    def load_params(self, name: str, force: bool = False) -> ParamSet:
        ckpt = self.root / "ckpt" / f"{name}.uamt"
        if not ckpt.exists():
            raise StageError(f"missing upstream checkpoint {ckpt}")
        meta = json.loads((self.root / "ckpt" / f"{name}.meta.json").read_text())
        if meta["config_hash"] != self.hash and not force:
            raise ArtifactMismatch(
                f"checkpoint {name}: config hash {meta['config_hash']} "
                f"!= current {self.hash}"
            )
        return load_checkpoint(ckpt)


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


class RunLock:
    """Exclusive ownership of a run directory while a stage executes."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StageError(f"run directory is locked by {self.path}")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


# -- pseudo-label files --------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_label_set(labels: PseudoLabelSet, path, model_hash: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "iteration": labels.iteration,
            "threshold": labels.threshold_used,
            "model_checkpoint_hash": model_hash,
        }
        fh.write(json.dumps(header) + "\n")
        for scene_id in sorted(labels.labels):
            dets = labels.labels[scene_id]
            body = ",".join(
                f"[{_fmt(d.box.cx)},{_fmt(d.box.cy)},{_fmt(d.box.w)},"
                f"{_fmt(d.box.l)},{d.box.orient},{_fmt(d.confidence)}]"
                for d in dets
            )
            fh.write(f'{{"scene_id":{json.dumps(scene_id)},"detections":[{body}]}}\n')


def read_label_set(path) -> PseudoLabelSet:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty label file")
    header = json.loads(lines[0])
    labels: dict[str, list[Detection]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            labels[obj["scene_id"]] = [
                Detection(
                    BBox(float(d[0]), float(d[1]), float(d[2]), float(d[3]), int(d[4])),
                    float(d[5]),
                )
                for d in obj["detections"]
            ]
        except (ValueError, KeyError, IndexError) as exc:
            raise ValueError(f"{path}: malformed record at line {lineno}: {exc}")
    return PseudoLabelSet(header["iteration"], header["threshold"], labels)


# -- stages --------------------------------------------------------------------


def stage_gen_data(config: dict, out_dir) -> dict:
    run = RunDir(out_dir, config)
    with RunLock(out_dir):
        run.write_resolved_config()
        splits = generate_splits(config)
        files = {}
        for name, withhold in (
            ("source_train", False),
            ("source_eval", False),
            ("target_train", True),  # labels withheld: adaptation is unsupervised
            ("target_eval", False),  # labeled, analysis only
        ):
            p = run.path("data", f"{name}.jsonl")
            write_dataset(splits[name], p, withhold_labels=withhold)
            files[name] = str(p)
        manifest = {
            "config_hash": run.hash,
            "seed": config["seed"],
            "files": files,
            "scene_counts": {k: len(v) for k, v in splits.items()},
        }
        run.path("manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def stage_train_source(config: dict, out_dir, oracle: bool = False) -> str:
    """Train the source model (or, in analysis mode, the target-labels oracle)."""
    run = RunDir(out_dir, config)
    cfg = adapt_config(config)
    spec = grid_spec(config)
    settings = detector_settings(config)
    with RunLock(out_dir):
        splits = generate_splits(config)
        scenes = splits["target_train"] if oracle else splits["source_train"]
        labels = {s.scene_id: list(s.gt_boxes) for s in scenes}
        stream = RngStream(config["seed"]).child(100 if not oracle else 101)
        init = init_detector_params(spec, stream.child(0))
        params = adapt.train_detector(
            scenes, labels, init, cfg, spec, stream.child(1),
            cfg.source_epochs, augment=not oracle, settings=settings,
        )
        name = "oracle" if oracle else "source"
        run.save_params(name, params, "train_source")
    return name


def stage_pseudo_iter(config: dict, out_dir, force: bool = False) -> list[str]:
    run = RunDir(out_dir, config)
    cfg = adapt_config(config)
    spec = grid_spec(config)
    settings = detector_settings(config)
    with RunLock(out_dir):
        source = run.load_params("source", force)
        target = read_dataset(run.root / "data" / "target_train.jsonl")
        stream = RngStream(config["seed"]).child(200)
        label_sets, models = adapt.iterative_pseudo_rounds(
            source, target, cfg, spec, stream, settings
        )
        written = []
        analysis_delta = config["eval"]["analysis_delta"]
        for j, (labels, model) in enumerate(zip(label_sets, models)):
            ckpt = run.save_params(f"pseudo_iter{j}", model, "pseudo_iter")
            write_label_set(
                labels, run.path("labels", f"pseudo_iter{j}.jsonl"), _file_hash(ckpt)
            )
            # fixed-low-threshold copies keep confidence histograms comparable
            analysis = adapt.infer_pseudo_labels(
                model, target, analysis_delta, spec, j, settings
            )
            write_label_set(
                analysis, run.path("labels", f"analysis_iter{j}.jsonl"), _file_hash(ckpt)
            )
            written.append(f"pseudo_iter{j}")
        return written


def stage_adapt(config: dict, out_dir, force: bool = False) -> dict:
    run = RunDir(out_dir, config)
    cfg = adapt_config(config)
    spec = grid_spec(config)
    settings = detector_settings(config)
    with RunLock(out_dir):
        source = run.load_params("source", force)
        target = read_dataset(run.root / "data" / "target_train.jsonl")
        labels = read_label_set(
            run.root / "labels" / f"pseudo_iter{cfg.iterations}.jsonl"
        )
        stream = RngStream(config["seed"]).child(300)
        student, teacher, log = adapt.mean_teacher_train(
            source, target, labels, cfg, spec, stream, settings=settings
        )
        run.save_params("student", student, "adapt")
        run.save_params("teacher", teacher, "adapt")
        _write_training_log(log, run.path("logs", "mean_teacher.csv"))
        _write_snapshots(log, run.path("logs", "variance_snapshots.json"))
        return {"epochs": len(log.epochs)}


def _write_training_log(log: adapt.TrainLog, path) -> None:
    cols = ["epoch", "step", "rpn_cls", "rpn_reg", "rpn_dir",
            "roi_cls_unc", "roi_tea", "mean_C", "frac_lower_clip"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in log.steps:
            writer.writerow({k: row[k] for k in cols})


def _write_snapshots(log: adapt.TrainLog, path) -> None:
    obj = {
        tag: [
            {
                "scene_id": r["scene_id"],
                "box": [r["box"].cx, r["box"].cy, r["box"].w, r["box"].l, r["box"].orient],
                "pseudo_target": r["pseudo_target"],
                "variance": r["variance"],
            }
            for r in rois
        ]
        for tag, rois in log.snapshots.items()
    }
    Path(path).write_text(json.dumps(obj))


def read_snapshots(path) -> dict:
    obj = json.loads(Path(path).read_text())
    return {
        tag: [
            {
                "scene_id": r["scene_id"],
                "box": BBox(*r["box"][:4], int(r["box"][4])),
                "pseudo_target": r["pseudo_target"],
                "variance": r["variance"],
            }
            for r in rois
        ]
        for tag, rois in obj.items()
    }


def stage_eval(
    config: dict, out_dir, checkpoint: str, split: str, force: bool = False
) -> evalkit.EvalReport:
    run = RunDir(out_dir, config)
    spec = grid_spec(config)
    settings = detector_settings(config)
    with RunLock(out_dir):
        params = run.load_params(checkpoint, force)
        scenes = generate_splits(config)[split]  # labeled copy
        dets = {
            s.scene_id: adapt.infer_scene(params, s, spec, settings) for s in scenes
        }
        report = evalkit.evaluate(
            dets, scenes, config["eval"]["iou_thresh"], config["eval"]["interp_points"]
        )
        payload = {
            "checkpoint": checkpoint,
            "split": split,
            "seed": config["seed"],
            "config_hash": run.hash,
            "iou_thresh": report.iou_thresh,
            "tiers": {
                t: {
                    "ap": r.ap, "tp": r.tp, "fp": r.fp, "fn": r.fn, "n_gt": r.n_gt,
                }
                for t, r in report.tiers.items()
            },
        }
        run.path("reports", f"eval_{checkpoint}_{split}_seed{config['seed']}.json").write_text(
            json.dumps(payload, indent=2)
        )
    return report


def stage_report(config: dict, out_dir, force: bool = False) -> dict:
    """Emit the three diagnostic CSVs plus a combined summary."""
    run = RunDir(out_dir, config)
    cfg = adapt_config(config)
    spec = grid_spec(config)
    settings = detector_settings(config)
    seed = config["seed"]
    with RunLock(out_dir):
        splits = generate_splits(config)
        target_labeled = splits["target_train"]  # labeled analysis copy
        target_eval = splits["target_eval"]

        # confidence-vs-correctness density per iteration
        label_sets = {}
        for j in range(cfg.iterations + 1):
            ls = read_label_set(run.root / "labels" / f"analysis_iter{j}.jsonl")
            label_sets[j] = ls.labels
        density = evalkit.confidence_density_report(
            label_sets, target_labeled, config["eval"]["correctness_iou"]
        )
        with open(run.path("reports", f"fig4_confidence_density_seed{seed}.csv"),
                  "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "bin_lo", "bin_hi", "correct", "incorrect"])
            for j, d in density.items():
                e = d["bin_edges"]
                for b in range(len(d["correct_hist"])):
                    w.writerow([j, e[b], e[b + 1], d["correct_hist"][b], d["incorrect_hist"][b]])

        # AP per pseudo-label iteration
        det_by_iter = {}
        for j in range(cfg.iterations + 1):
            params = run.load_params(f"pseudo_iter{j}", force)
            det_by_iter[j] = {
                s.scene_id: adapt.infer_scene(params, s, spec, settings)
                for s in target_eval
            }
        curve = evalkit.map_over_iterations(
            det_by_iter, target_eval, config["eval"]["iou_thresh"]
        )
        with open(run.path("reports", f"fig5_map_per_iteration_seed{seed}.csv"),
                  "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "moderate_ap"])
            for j, ap in curve:
                w.writerow([j, "" if ap is None else ap])

        # variance of incorrect ROIs, first vs last epoch
        snapshots = read_snapshots(run.root / "logs" / "variance_snapshots.json")
        variance = evalkit.variance_report(
            snapshots, target_labeled, config["eval"]["correctness_iou"]
        )
        with open(run.path("reports", f"fig6_variance_shift_seed{seed}.csv"),
                  "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["snapshot", "n_incorrect", "median_variance", "frac_low_variance"])
            for tag, d in variance.items():
                w.writerow([tag, d["n_incorrect"], d["median_variance"], d["frac_low_variance"]])

        summary = {
            "seed": seed,
            "config_hash": run.hash,
            "map_per_iteration": {j: ap for j, ap in curve},
            "confidence_density": {
                j: {
                    "mean_incorrect_confidence": d["mean_incorrect_confidence"],
                    "frac_incorrect_above_0p8": d["frac_incorrect_above_0p8"],
                    "n_incorrect": d["n_incorrect"],
                    "n_correct": d["n_correct"],
                }
                for j, d in density.items()
            },
            "variance_shift": {
                tag: {
                    "median_variance": d["median_variance"],
                    "frac_low_variance": d["frac_low_variance"],
                    "n_incorrect": d["n_incorrect"],
                }
                for tag, d in variance.items()
            },
        }
        run.path("reports", f"summary_seed{seed}.json").write_text(
            json.dumps(summary, indent=2)
        )
    return summary


def run_pipeline(config: dict, out_dir) -> dict:
    """Full run: data -> source training -> pseudo rounds -> mean teacher
    -> evaluation -> reports.  Returns the headline numbers."""
    stage_gen_data(config, out_dir)
    stage_train_source(config, out_dir)
    stage_pseudo_iter(config, out_dir)
    stage_adapt(config, out_dir)
    src_on_src = stage_eval(config, out_dir, "source", "source_eval")
    src_on_tgt = stage_eval(config, out_dir, "source", "target_eval")
    student_on_tgt = stage_eval(config, out_dir, "student", "target_eval")
    teacher_on_tgt = stage_eval(config, out_dir, "teacher", "target_eval")
    summary = stage_report(config, out_dir)
    headline = {
        "source_on_source_moderate_ap": src_on_src.moderate_ap(),
        "source_on_target_moderate_ap": src_on_tgt.moderate_ap(),
        "student_on_target_moderate_ap": student_on_tgt.moderate_ap(),
        "teacher_on_target_moderate_ap": teacher_on_tgt.moderate_ap(),
        **{f"report_{k}": v for k, v in summary.items() if k != "config_hash"},
    }
    run = RunDir(out_dir, config)
    run.path("reports", f"headline_seed{config['seed']}.json").write_text(
        json.dumps(headline, indent=2, default=str)
    )
    return headline
