"""Scene ingestion: KITTI label files, synthetic LiDAR-like scenes, and the
on-disk scene layout used by the CLI.

Coordinate convention for label ingestion (documented, deliberately simple;
a full camera calibration pipeline is out of scope): the camera frame has x
right, y down, z forward, and ``location`` is the bottom-face center. The
scene frame has x forward, y right (same axis as camera x), z up:

    cx = z_cam,  cy = x_cam,  cz = h/2 - y_cam,
    dx = l,      dy = w,      dz = h,
    theta = canonical(-rotation_y - pi/2)

so rotation_y = -pi/2 (a car heading away from the sensor) becomes theta = 0.
An optional rigid transform (yaw + translation) is applied on top.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box3D, canonical_angle, count_points_in_box, rotated_iou_matrix

DIFF_NAMES = ("easy", "moderate", "hard")
DIFF_IGNORED = 3

# synthetic labels carry this dummy image bbox so they classify as easy
_SYNTH_BBOX = (0.0, 0.0, 100.0, 100.0)


class LabelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class KittiLabel:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple  # (left, top, right, bottom) image-plane floats
    dimensions: tuple  # (h, w, l) meters
    location: tuple  # (x, y, z) camera-frame meters
    rotation_y: float
    score: float | None = None

    @property
    def dont_care(self) -> bool:
        return self.type == "DontCare"


def parse_kitti_labels(text: str) -> list:
    """One record per non-empty line; 15 fields, or 16 with a trailing score."""
    labels = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in (15, 16):
            raise LabelFormatError(
                f"line {lineno}: expected 15 or 16 fields, got {len(fields)}"
            )
        try:
            nums = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise LabelFormatError(f"line {lineno}: non-numeric field ({exc})") from None
        if not all(math.isfinite(v) for v in nums):
            raise LabelFormatError(f"line {lineno}: non-finite field")
        labels.append(
            KittiLabel(
                type=fields[0],
                truncated=nums[0],
                occluded=int(nums[1]),
                alpha=nums[2],
                bbox=tuple(nums[3:7]),
                dimensions=tuple(nums[7:10]),
                location=tuple(nums[10:13]),
                rotation_y=nums[13],
                score=nums[14] if len(fields) == 16 else None,
            )
        )
    return labels


def format_kitti_labels(labels) -> str:
    """Inverse of parse_kitti_labels; floats carry 6 decimals so values
    round-trip well inside 1e-4."""
    lines = []
    for lb in labels:
        parts = [lb.type, f"{lb.truncated:.6f}", str(int(lb.occluded)), f"{lb.alpha:.6f}"]
        parts += [f"{v:.6f}" for v in lb.bbox]
        parts += [f"{v:.6f}" for v in lb.dimensions]
        parts += [f"{v:.6f}" for v in lb.location]
        parts.append(f"{lb.rotation_y:.6f}")
        if lb.score is not None:
            parts.append(f"{lb.score:.6f}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + ("\n" if lines else "")


@dataclass(frozen=True)
class RigidTransform:
    """Yaw about +z plus a translation, applied to scene-frame boxes."""

    yaw: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    def apply(self, box: Box3D) -> Box3D:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Box3D(
            cx=c * box.cx - s * box.cy + self.tx,
            cy=s * box.cx + c * box.cy + self.ty,
            cz=box.cz + self.tz,
            dx=box.dx,
            dy=box.dy,
            dz=box.dz,
            theta=canonical_angle(box.theta + self.yaw),
        )


def kitti_to_scene_boxes(labels, transform: RigidTransform | None = None) -> list:
    """Scene-frame boxes for non-DontCare labels, in label order."""
    boxes = []
    for lb in labels:
        if lb.dont_care:
            continue
        h, w, length = lb.dimensions
        x_cam, y_cam, z_cam = lb.location
        box = Box3D(
            cx=z_cam,
            cy=x_cam,
            cz=h / 2.0 - y_cam,
            dx=length,
            dy=w,
            dz=h,
            theta=canonical_angle(-lb.rotation_y - math.pi / 2.0),
        )
        if transform is not None:
            box = transform.apply(box)
        boxes.append(box)
    return boxes


def box_to_kitti_label(
    box: Box3D, label: str = "Car", score: float | None = None, bbox: tuple = _SYNTH_BBOX
) -> KittiLabel:
    """Inverse of the documented ingestion mapping (identity calibration)."""
    return KittiLabel(
        type=label,
        truncated=0.0,
        occluded=0,
        alpha=-10.0,
        bbox=bbox,
        dimensions=(box.dz, box.dy, box.dx),
        location=(box.cy, box.dz / 2.0 - box.cz, box.cx),
        rotation_y=-box.theta - math.pi / 2.0,
        score=score,
    )


def label_difficulty(lb: KittiLabel) -> int:
    """0 easy / 1 moderate / 2 hard / 3 ignored, by the usual KITTI
    thresholds on image bbox height, occlusion and truncation."""
    height = lb.bbox[3] - lb.bbox[1]
    if height >= 40 and lb.occluded <= 0 and lb.truncated <= 0.15:
        return 0
    if height >= 25 and lb.occluded <= 1 and lb.truncated <= 0.30:
        return 1
    if height >= 25 and lb.occluded <= 2 and lb.truncated <= 0.50:
        return 2
    return DIFF_IGNORED


@dataclass
class Scene:
    scene_id: str
    points: np.ndarray  # (P, 3)
    boxes: list  # list[Box3D]
    difficulties: list = field(default_factory=list)  # per box, 0/1/2/3

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite scene points")
        if not self.difficulties:
            self.difficulties = [0] * len(self.boxes)

    def gt_bev(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 5))
        return np.stack([b.bev().as_array() for b in self.boxes])


@dataclass(frozen=True)
class SyntheticConfig:
    x_min: float = 0.0
    x_max: float = 70.4
    y_min: float = -40.0
    y_max: float = 40.0
    max_boxes: int = 6
    clutter_points: int = 6000
    min_points_per_box: int = 10
    max_overlap_iou: float = 0.05


def _sample_box_surface(rng, box: Box3D, n: int) -> np.ndarray:
    """Points on the four vertical faces (plus a few on top), inset 2 cm so
    every sample is strictly inside the BEV rectangle."""
    inset = 0.02
    hx = max(box.dx / 2.0 - inset, box.dx / 4.0)
    hy = max(box.dy / 2.0 - inset, box.dy / 4.0)
    face = rng.integers(0, 5, n)  # 0/1: +-x walls, 2/3: +-y walls, 4: top
    lx = rng.uniform(-hx, hx, n)
    ly = rng.uniform(-hy, hy, n)
    lx = np.where(face == 0, hx, np.where(face == 1, -hx, lx))
    ly = np.where(face == 2, hy, np.where(face == 3, -hy, ly))
    z_lo = box.cz - box.dz / 2.0 + inset
    z_hi = box.cz + box.dz / 2.0 - inset
    z = np.where(face == 4, z_hi, rng.uniform(z_lo, z_hi, n))
    c, s = math.cos(box.theta), math.sin(box.theta)
    gx = box.cx + c * lx - s * ly
    gy = box.cy + s * lx + c * ly
    return np.stack([gx, gy, z], axis=1)


def generate_synthetic_scene(rng: np.random.Generator, cfg: SyntheticConfig, scene_id: str = "0") -> Scene:
    """Random car-like scene with construction guarantees: pairwise BEV IoU
    below ``max_overlap_iou`` and at least ``min_points_per_box`` surface
    points inside every box."""
    k = int(rng.integers(1, cfg.max_boxes + 1))
    boxes = []
    attempts = 0
    while len(boxes) < k:
        if attempts >= 1000:
            k = len(boxes) if boxes else 1
            warnings.warn(
                f"could not place {cfg.max_boxes} non-overlapping boxes; reduced to {k}",
                RuntimeWarning,
            )
            if boxes:
                break
        attempts += 1
        dx = max(rng.normal(3.9, 0.4), 1.0)
        dy = max(rng.normal(1.6, 0.1), 0.5)
        dz = max(rng.normal(1.5, 0.1), 0.5)
        cand = Box3D(
            cx=rng.uniform(cfg.x_min, cfg.x_max),
            cy=rng.uniform(cfg.y_min, cfg.y_max),
            cz=dz / 2.0,
            dx=dx,
            dy=dy,
            dz=dz,
            theta=rng.uniform(-math.pi / 2.0, math.pi / 2.0),
        )
        if boxes:
            ious = rotated_iou_matrix(
                cand.bev().as_array()[None, :], np.stack([b.bev().as_array() for b in boxes])
            )[0]
            if ious.max() >= cfg.max_overlap_iou:
                continue
        boxes.append(cand)

    clouds = []
    for box in boxes:
        dist = math.hypot(box.cx, box.cy)
        n_pts = max(cfg.min_points_per_box, int(round(150.0 / (1.0 + dist / 30.0))))
        pts = _sample_box_surface(rng, box, n_pts)
        assert count_points_in_box(pts[:, :2], box.bev()) >= cfg.min_points_per_box
        clouds.append(pts)
    if cfg.clutter_points:
        clutter = np.stack(
            [
                rng.uniform(cfg.x_min, cfg.x_max, cfg.clutter_points),
                rng.uniform(cfg.y_min, cfg.y_max, cfg.clutter_points),
                rng.uniform(0.0, 0.2, cfg.clutter_points),
            ],
            axis=1,
        )
        clouds.append(clutter)
    points = np.concatenate(clouds) if clouds else np.zeros((0, 3))
    return Scene(scene_id=scene_id, points=points, boxes=boxes, difficulties=[0] * len(boxes))


# ---------------------------------------------------------------------------
# on-disk scene layout: <root>/points/<id>.npy + <root>/labels/<id>.txt
# ---------------------------------------------------------------------------


def save_scene(root, scene: Scene) -> None:
    root = Path(root)
    (root / "points").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    np.save(root / "points" / f"{scene.scene_id}.npy", scene.points.astype(np.float32))
    labels = [box_to_kitti_label(b) for b in scene.boxes]
    (root / "labels" / f"{scene.scene_id}.txt").write_text(format_kitti_labels(labels))


def list_scene_ids(root) -> list:
    root = Path(root)
    ids = sorted(p.stem for p in (root / "points").glob("*.npy"))
    if not ids:
        raise FileNotFoundError(f"no scenes under {root}")
    return ids


def load_scene(root, scene_id: str) -> Scene:
    root = Path(root)
    points = np.load(root / "points" / f"{scene_id}.npy").astype(float)
    label_path = root / "labels" / f"{scene_id}.txt"
    boxes = []
    difficulties = []
    if label_path.exists():
        labels = parse_kitti_labels(label_path.read_text())
        kept = [lb for lb in labels if not lb.dont_care]
        boxes = kitti_to_scene_boxes(kept)
        difficulties = [label_difficulty(lb) for lb in kept]
    return Scene(scene_id=scene_id, points=points, boxes=boxes, difficulties=difficulties)


def load_scenes(root) -> list:
    return [load_scene(root, sid) for sid in list_scene_ids(root)]
