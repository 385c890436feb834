"""Average-precision evaluation at 11 or 40 interpolated recall positions.

Detections are matched greedily per scene in descending score order against
unmatched ground truth at or above the IoU threshold. For each difficulty
level, ground truth of a harder level is *ignored*: a detection matching it
counts neither as true nor as false positive, and the box does not enter the
recall denominator. Precision is interpolated as the running maximum toward
higher recall; AP is the mean of the interpolated precisions at the protocol
recall positions, reported in percent. Per-scene match results are merged by
scene id, so the reduction is order-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DIFF_NAMES
from .geometry import iou_3d_matrix, rotated_iou_matrix


@dataclass
class EvalReport:
    mode: str
    iou_threshold: float
    recall_positions: int
    ap: dict  # difficulty name -> AP percent
    mean_ap: float
    curves: dict  # difficulty name -> dict(recall, precision, interp_recall, interp_precision)

    def summary(self) -> str:
        parts = [f"AP_{self.mode.upper()}@{self.iou_threshold:g} (R{self.recall_positions})"]
        parts += [f"{name}: {self.ap[name]:6.2f}" for name in DIFF_NAMES]
        parts.append(f"mAP: {self.mean_ap:6.2f}")
        return "  ".join(parts)


def _pair_ious(dets, gts, mode: str) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    if mode == "bev":
        d = np.stack([det.box.bev().as_array() for det in dets])
        g = np.stack([box.bev().as_array() for box in gts])
        return rotated_iou_matrix(d, g)
    if mode == "3d":
        d = np.stack([det.box.as_array() for det in dets])
        g = np.stack([box.as_array() for box in gts])
        return iou_3d_matrix(d, g)
    raise ValueError(f"unknown IoU mode {mode!r}")


def _match_scene(dets, gt_boxes, gt_difficulties, level: int, iou_threshold: float, mode: str):
    """Greedy per-scene matching.

    Returns (records, num_active_gt) where each record is (score, tp, ignored).
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    ious = _pair_ious(dets, gt_boxes, mode)
    active = [d <= level for d in gt_difficulties]
    taken = [False] * len(gt_boxes)
    records = []
    for i in order:
        best_j = -1
        ign_j = -1
        for j in range(len(gt_boxes)):
            if taken[j] or ious[i, j] < iou_threshold:
                continue
            if active[j]:
                if best_j < 0 or ious[i, j] > ious[i, best_j]:
                    best_j = j
            elif ign_j < 0:
                ign_j = j
        if best_j >= 0:
            taken[best_j] = True
            records.append((dets[i].score, True, False))
        elif ign_j >= 0:
            taken[ign_j] = True
            records.append((dets[i].score, False, True))
        else:
            records.append((dets[i].score, False, False))
    return records, sum(active)


def _interp_precision(recall: np.ndarray, precision: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Max precision over all operating points with recall >= r (0 if none)."""
    out = np.zeros(positions.size)
    for k, r in enumerate(positions):
        mask = recall >= r - 1e-12
        if mask.any():
            out[k] = precision[mask].max()
    return out


def recall_positions_for(count: int) -> np.ndarray:
    if count == 11:
        return np.linspace(0.0, 1.0, 11)
    if count == 40:
        return np.arange(1, 41) / 40.0
    raise ValueError("recall position count must be 11 or 40")


def evaluate_ap(
    dets_by_scene: dict,
    gts_by_scene: dict,
    iou_threshold: float = 0.7,
    recall_positions: int = 40,
    mode: str = "bev",
) -> EvalReport:
    """AP over scenes.

    ``dets_by_scene`` maps scene id to a list of Detection; ``gts_by_scene``
    maps scene id to (list of Box3D, list of difficulty ints).
    """
    positions = recall_positions_for(recall_positions)
    ap = {}
    curves = {}
    for level, name in enumerate(DIFF_NAMES):
        records = []
        total_gt = 0
        for sid in sorted(gts_by_scene):
            gt_boxes, gt_diff = gts_by_scene[sid]
            dets = dets_by_scene.get(sid, [])
            recs, n_active = _match_scene(dets, gt_boxes, gt_diff, level, iou_threshold, mode)
            records.extend(recs)
            total_gt += n_active
        records.sort(key=lambda r: -r[0])
        kept = [(score, tp) for score, tp, ignored in records if not ignored]
        if total_gt == 0 or not kept:
            ap[name] = 0.0
            curves[name] = {
                "recall": np.zeros(0),
                "precision": np.zeros(0),
                "interp_recall": positions,
                "interp_precision": np.zeros(positions.size),
            }
            continue
        tp = np.cumsum([1.0 if is_tp else 0.0 for _, is_tp in kept])
        fp = np.cumsum([0.0 if is_tp else 1.0 for _, is_tp in kept])
        recall = tp / total_gt
        precision = tp / np.maximum(tp + fp, 1e-12)
        interp = _interp_precision(recall, precision, positions)
        ap[name] = float(interp.mean() * 100.0)
        curves[name] = {
            "recall": recall,
            "precision": precision,
            "interp_recall": positions,
            "interp_precision": interp,
        }
    mean_ap = float(np.mean([ap[name] for name in DIFF_NAMES]))
    return EvalReport(
        mode=mode,
        iou_threshold=iou_threshold,
        recall_positions=recall_positions,
        ap=ap,
        mean_ap=mean_ap,
        curves=curves,
    )


def gts_from_scenes(scenes) -> dict:
    return {s.scene_id: (list(s.boxes), list(s.difficulties)) for s in scenes}
