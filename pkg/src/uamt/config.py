"""Run configuration: nested defaults, JSON loading, overrides, hashing.

Defaults carry the method's standard hyperparameters (thresholds
0.1/0.6/0.8, 15 MC passes, keep ratio 0.999, batch 16); epoch counts
and the detector geometry are desk-scale choices sized so the full
pipeline trains in minutes on a CPU.  Unknown keys are rejected so
typos fail loudly.
"""

from __future__ import annotations

import copy
import hashlib
import json


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "scenegen": {
        "n_train": 200,
        "n_eval": 100,
        "source": {
            "n_objects": [3, 8],
            "object_w_mean": 2.0,
            "object_l_mean": 4.6,
            "object_size_sd": 0.25,
            "points_per_m2": 6.0,
            "clutter_points": [40, 120],
        },
        "target": {
            "n_objects": [1, 6],
            "object_w_mean": 1.8,
            "object_l_mean": 4.0,
            "object_size_sd": 0.25,
            "points_per_m2": 3.0,
            "clutter_points": [40, 120],
        },
        "rain": {
            "enabled": False,
            "rate_range_mm_per_hr": [0.0, 100.0],
            "drop_coeff": 0.05,
            "noise_sd_per_m": 0.002,
        },
    },
    "detector": {
        "extent_x": 32.0,
        "extent_y": 32.0,
        "cells_x": 32,
        "cells_y": 32,
        "anchor_w": 2.0,
        "anchor_l": 4.0,
        "focal_gamma": 2.0,
        "focal_alpha": 0.25,
        "smooth_l1_beta": 0.25,
        "nms_iou": 0.05,
        "nms_top_k": 50,
    },
    "adapt": {
        "delta_schedule": [0.1, 0.6, 0.8],
        "iterations": 3,
        "mc_passes": 15,
        "alpha": 0.999,
        "epochs": 30,
        "source_epochs": 120,
        "pseudo_epochs": 40,
        "batch_size": 16,
        "lr": 1e-3,
        "use_uncertainty": True,
        "weight_teacher_loss": True,
        "per_epoch_ema": False,
        "student_dropout": True,
        "object_scale_range": [0.9, 1.1],
    },
    "eval": {
        "iou_thresh": 0.7,
        "correctness_iou": 0.5,
        "interp_points": 40,
        "analysis_delta": 0.05,
    },
    "io": {
        "out_dir": "runs/default",
    },
}


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be a section")
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = value
    return out


def resolve_config(override: dict | None = None) -> dict:
    return _merge(DEFAULT_CONFIG, override or {})


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return resolve_config(json.load(fh))


def apply_overrides(config: dict, assignments: list[str]) -> dict:
    """Apply --set key.path=value overrides (values parsed as JSON)."""
    override: dict = {}
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value: {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = override
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return _merge(config, override)


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
