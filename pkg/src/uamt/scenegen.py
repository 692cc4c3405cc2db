"""Synthetic BEV lidar scenes with controllable domain shift.

Scenes are top-down point sets: each object box is filled with a
Poisson-count point cloud at the domain's surface density, plus uniform
clutter.  Domains differ in object size, point density, and object
count; a toy rain model degrades returns with range-dependent dropout
and radial noise.  Everything is a pure function of (config, stream).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import BBox, iou, iou_matrix
from .rng import RngStream

# All scenes live on a fixed 32 m x 32 m extent centered at the sensor.
EXTENT_RADIUS = float(np.hypot(16.0, 16.0))


@dataclass
class PointScene:
    scene_id: str
    points: np.ndarray  # (n, 3): x, y, intensity
    gt_boxes: list[BBox]
    domain_tag: str
    shortfall: int = 0  # objects dropped when rejection sampling ran out

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)


@dataclass(frozen=True)
class DomainConfig:
    name: str
    extent_x: float = 32.0
    extent_y: float = 32.0
    n_objects: tuple[int, int] = (3, 8)
    object_w_mean: float = 2.0
    object_l_mean: float = 4.6
    object_size_sd: float = 0.25
    points_per_m2: float = 6.0
    clutter_points: tuple[int, int] = (40, 120)

    def __post_init__(self):
        if self.points_per_m2 <= 0 or self.object_w_mean <= 0 or self.object_l_mean <= 0:
            raise ValueError("densities and sizes must be positive")


@dataclass(frozen=True)
class RainConfig:
    rate_range_mm_per_hr: tuple[float, float] = (0.0, 100.0)
    drop_coeff: float = 0.05
    noise_sd_per_m: float = 0.002

    def __post_init__(self):
        lo, hi = self.rate_range_mm_per_hr
        if not 0 <= lo <= hi:
            raise ValueError("rain rate range must satisfy 0 <= low <= high")


# The canonical experiment domains: smaller, sparser objects on the target
# side encode the cross-dataset size/density gap the adaptation must bridge.
SOURCE_DOMAIN = DomainConfig(
    name="source",
    n_objects=(3, 8),
    object_w_mean=2.0,
    object_l_mean=4.6,
    points_per_m2=6.0,
)
TARGET_DOMAIN = DomainConfig(
    name="target",
    n_objects=(1, 6),
    object_w_mean=1.8,
    object_l_mean=4.0,
    points_per_m2=3.0,
)


def sample_scene(
    cfg: DomainConfig, stream: RngStream, scene_id: str = "scene"
) -> PointScene:
    """Draw one labeled scene; deterministic given (cfg, stream)."""
    gen = stream.generator()
    n_target = int(gen.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    boxes: list[BBox] = []
    attempts = 0
    while len(boxes) < n_target and attempts < 1000:
        attempts += 1
        w = max(0.3, gen.normal(cfg.object_w_mean, cfg.object_size_sd))
        l = max(0.3, gen.normal(cfg.object_l_mean, cfg.object_size_sd))
        if w > l:
            w, l = l, w
        orient = int(gen.integers(0, 2))
        ex = l if orient == 0 else w
        ey = w if orient == 0 else l
        cx = gen.uniform(-cfg.extent_x / 2 + ex / 2, cfg.extent_x / 2 - ex / 2)
        cy = gen.uniform(-cfg.extent_y / 2 + ey / 2, cfg.extent_y / 2 - ey / 2)
        cand = BBox(cx, cy, w, l, orient)
        if all(iou(cand, b) == 0.0 for b in boxes):
            boxes.append(cand)

    chunks = []
    for b in boxes:
        count = int(gen.poisson(cfg.points_per_m2 * b.area()))
        if count:
            px = gen.uniform(b.cx - b.extent_x() / 2, b.cx + b.extent_x() / 2, count)
            py = gen.uniform(b.cy - b.extent_y() / 2, b.cy + b.extent_y() / 2, count)
            chunks.append(np.column_stack([px, py, gen.uniform(0, 1, count)]))
    n_clutter = int(gen.integers(cfg.clutter_points[0], cfg.clutter_points[1] + 1))
    if n_clutter:
        px = gen.uniform(-cfg.extent_x / 2, cfg.extent_x / 2, n_clutter)
        py = gen.uniform(-cfg.extent_y / 2, cfg.extent_y / 2, n_clutter)
        chunks.append(np.column_stack([px, py, gen.uniform(0, 1, n_clutter)]))
    points = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    return PointScene(scene_id, points, boxes, cfg.name, shortfall=n_target - len(boxes))


def apply_rain(
    scene: PointScene, rate_mm_hr: float, cfg: RainConfig, stream: RngStream
) -> PointScene:
    """Range-dependent point dropout plus radial noise; labels untouched."""
    if rate_mm_hr < 0:
        raise ValueError("rain rate must be non-negative")
    if rate_mm_hr == 0.0 or len(scene.points) == 0:
        return replace_points(scene, scene.points.copy())
    gen = stream.generator()
    pts = scene.points
    rng_dist = np.hypot(pts[:, 0], pts[:, 1])
    p_drop = np.minimum(
        0.9, cfg.drop_coeff * rate_mm_hr**0.6 * rng_dist / EXTENT_RADIUS
    )
    survive = gen.random(len(pts)) >= p_drop
    kept = pts[survive].copy()
    if len(kept):
        r = np.hypot(kept[:, 0], kept[:, 1])
        sd = cfg.noise_sd_per_m * r * (rate_mm_hr / 100.0)
        dr = gen.normal(0.0, 1.0, len(kept)) * sd
        safe = np.where(r > 1e-9, r, 1.0)
        scale = (r + dr) / safe
        kept[:, 0] *= scale
        kept[:, 1] *= scale
    return replace_points(scene, kept)


def rain_drop_probability(rate_mm_hr, range_m, cfg: RainConfig):
    return min(0.9, cfg.drop_coeff * rate_mm_hr**0.6 * range_m / EXTENT_RADIUS)


def replace_points(scene: PointScene, points: np.ndarray) -> PointScene:
    return PointScene(scene.scene_id, points, list(scene.gt_boxes), scene.domain_tag)


def random_object_scaling(
    scene: PointScene, scale_range: tuple[float, float], stream: RngStream
) -> PointScene:
    """Scale each object box and its interior points about the box center."""
    lo, hi = scale_range
    if not 0 < lo <= hi:
        raise ValueError("scale range must satisfy 0 < lo <= hi")
    gen = stream.generator()
    points = scene.points.copy()
    boxes = list(scene.gt_boxes)
    for i in range(len(boxes)):
        for _attempt in range(2):
            s = gen.uniform(lo, hi)
            b = boxes[i]
            scaled = BBox(b.cx, b.cy, b.w * s, b.l * s, b.orient)
            others = boxes[:i] + boxes[i + 1 :]
            if others and iou_matrix([scaled], others)[0].max() > 0.0:
                continue  # retry once with a fresh factor, then skip
            inside = b.contains(points[:, 0], points[:, 1])
            points[inside, 0] = b.cx + (points[inside, 0] - b.cx) * s
            points[inside, 1] = b.cy + (points[inside, 1] - b.cy) * s
            boxes[i] = scaled
            break
    return PointScene(scene.scene_id, points, boxes, scene.domain_tag)


def global_augment(scene: PointScene, stream: RngStream) -> PointScene:
    """Global scale in [0.95, 1.05] about the origin plus a right-angle rotation."""
    gen = stream.generator()
    s = gen.uniform(0.95, 1.05)
    quarter_turns = int(gen.integers(0, 4))
    points = scene.points.copy()
    points[:, 0] *= s
    points[:, 1] *= s
    boxes = [BBox(b.cx * s, b.cy * s, b.w * s, b.l * s, b.orient) for b in scene.gt_boxes]
    for _ in range(quarter_turns):
        x = points[:, 0].copy()
        points[:, 0] = -points[:, 1]
        points[:, 1] = x
        boxes = [BBox(-b.cy, b.cx, b.w, b.l, 1 - b.orient) for b in boxes]
    return PointScene(scene.scene_id, points, boxes, scene.domain_tag)


def generate_dataset(
    cfg: DomainConfig,
    n_scenes: int,
    stream: RngStream,
    rain: RainConfig | None = None,
    id_prefix: str | None = None,
) -> list[PointScene]:
    """Generate scenes with stream-per-scene determinism; optional rain."""
    prefix = id_prefix or cfg.name
    scenes = []
    for i in range(n_scenes):
        scene = sample_scene(cfg, stream.child(i), f"{prefix}_{i:05d}")
        if rain is not None:
            rain_stream = stream.child(i).child(7001)
            rgen = rain_stream.generator()
            lo, hi = rain.rate_range_mm_per_hr
            rate = float(rgen.uniform(lo, hi))
            scene = apply_rain(scene, rate, rain, rain_stream.child(1))
        scenes.append(scene)
    return scenes


# -- dataset files ------------------------------------------------------------
# UTF-8, one JSON object per line with keys scene_id, domain_tag, points,
# gt_boxes; floats serialized with 17 significant digits for exact round-trip.


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _scene_line(scene: PointScene, withhold_labels: bool) -> str:
    pts = ",".join(
        f"[{_fmt(x)},{_fmt(y)},{_fmt(i)}]" for x, y, i in scene.points
    )
    if withhold_labels:
        gts = ""
    else:
        gts = ",".join(
            f"[{_fmt(b.cx)},{_fmt(b.cy)},{_fmt(b.w)},{_fmt(b.l)},{b.orient}]"
            for b in scene.gt_boxes
        )
    return (
        f'{{"scene_id":{json.dumps(scene.scene_id)},'
        f'"domain_tag":{json.dumps(scene.domain_tag)},'
        f'"points":[{pts}],"gt_boxes":[{gts}]}}'
    )


def write_dataset(scenes: list[PointScene], path, withhold_labels: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(_scene_line(scene, withhold_labels) + "\n")


def parse_scene_record(obj: dict) -> PointScene:
    boxes = [
        BBox(float(b[0]), float(b[1]), float(b[2]), float(b[3]), int(b[4]))
        for b in obj["gt_boxes"]
    ]
    points = np.array(obj["points"], dtype=np.float64).reshape(-1, 3)
    return PointScene(obj["scene_id"], points, boxes, obj["domain_tag"])


def read_dataset(path) -> list[PointScene]:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                scenes.append(parse_scene_record(obj))
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ValueError(f"{path}: malformed record at line {lineno}: {exc}")
    return scenes
