"""Multi-step inference: refine Gaussian-sampled proposals into detections.

The feature grid is built once per scene and every refinement step re-pools
RoI features from it. By default the decoded candidates of *all* steps are
pooled before the final rotated NMS; ``pool_all_steps=False`` keeps only the
last step's decodes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import Config
from .data import Scene, box_to_kitti_label, format_kitti_labels, kitti_to_scene_boxes, parse_kitti_labels
from .decoder import decoder_forward
from .diffusion import clamp_signal, ddim_step
from .features import build_bev_features, roi_pool_rotated
from .geometry import Box3D, Detection, nms_rotated
from .proposals import sample_inference_proposals


def step_times(total: int, steps: int) -> list:
    """Descending time levels [T, ..., 0]; equal strides when steps divides T."""
    if steps < 1:
        raise ValueError("need at least one sampling step")
    return [int(round(total - k * total / steps)) for k in range(steps + 1)]


def make_decoder_fn(params: dict, cfg: Config):
    """Wrap trained parameters into the inference decode seam."""
    dcfg = cfg.decoder_config()

    def decode(grid, boxes, signal, t):
        roi = roi_pool_rotated(grid, boxes, dcfg.pool_size)
        out = decoder_forward(params, roi, t, signal, dcfg)
        return out.probs, out.x0_signal, out.cz, out.dz

    return decode


def make_perfect_oracle(scene: Scene, cfg: Config):
    """Decode seam that returns, for every proposal, its nearest ground-truth
    box at full confidence. Used to exercise the sampling loop in isolation."""
    norm = cfg.normalizer()
    gt_bev = scene.gt_bev()
    gt_sig = norm.encode(gt_bev) if len(gt_bev) else None
    gt_cz = np.array([b.cz for b in scene.boxes])
    gt_dz = np.array([b.dz for b in scene.boxes])

    def decode(grid, boxes, signal, t):
        n = boxes.shape[0]
        if gt_sig is None:
            return np.zeros(n), np.asarray(signal, dtype=float).copy(), np.full(n, 0.75), np.full(n, 1.5)
        d2 = ((boxes[:, None, :2] - gt_bev[None, :, :2]) ** 2).sum(axis=2)
        nearest = np.argmin(d2, axis=1)
        return np.ones(n), gt_sig[nearest], gt_cz[nearest], gt_dz[nearest]

    return decode


def run_inference(
    decode_fn,
    points: np.ndarray,
    cfg: Config,
    steps: int,
    rng: np.random.Generator,
    num_proposals: int | None = None,
) -> list:
    """Detections for one scene (NMS survivors, descending score)."""
    norm = cfg.normalizer()
    sched = cfg.schedule()
    n = num_proposals if num_proposals is not None else cfg.proposals.n
    grid = build_bev_features(points, cfg.grid_config())

    times = step_times(sched.num_steps, steps)
    pset = sample_inference_proposals(n, times[0], norm, rng, cfg.effective_rho())
    signal = pset.signal
    boxes = pset.boxes

    candidates = []
    for t, t_prev in zip(times[:-1], times[1:]):
        probs, x0_sig, cz, dz = decode_fn(grid, boxes, signal, t)
        if cfg.nms.pool_all_steps or t_prev == 0:
            bev = norm.decode(x0_sig)
            for i in range(len(probs)):
                candidates.append(
                    Detection(
                        box=Box3D(
                            cx=bev[i, 0],
                            cy=bev[i, 1],
                            cz=cz[i],
                            dx=bev[i, 2],
                            dy=bev[i, 3],
                            dz=max(dz[i], 1e-3),
                            theta=bev[i, 4],
                        ),
                        score=float(probs[i]),
                    )
                )
        if t_prev > 0:
            noise = rng.standard_normal(signal.shape)
            signal = ddim_step(
                signal,
                x0_sig,
                t,
                t_prev,
                noise,
                sched,
                eta=cfg.diffusion.ddim_eta,
                printed_variant=cfg.diffusion.printed_sigma,
            )
            signal = clamp_signal(signal, norm.signal_scale)
            boxes = norm.decode(signal)
    return nms_rotated(candidates, cfg.nms.iou_threshold)


def infer_scene(decode_fn, scene: Scene, cfg: Config, steps: int, seed: int = 0) -> list:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _scene_key(scene.scene_id)]))
    return run_inference(decode_fn, scene.points, cfg, steps, rng)


def _scene_key(scene_id: str) -> int:
    try:
        return int(scene_id)
    except ValueError:
        return abs(hash(scene_id)) % (2**31)


def write_detections(out_dir, scene_id: str, detections) -> None:
    """KITTI label format with the trailing score field, one file per scene."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = [box_to_kitti_label(d.box, label=d.label, score=d.score) for d in detections]
    (out_dir / f"{scene_id}.txt").write_text(format_kitti_labels(labels))


def read_detections(path) -> list:
    """Detections from one KITTI-format file (score field required)."""
    labels = parse_kitti_labels(Path(path).read_text())
    kept = [lb for lb in labels if not lb.dont_care]
    boxes = kitti_to_scene_boxes(kept)
    dets = []
    for lb, box in zip(kept, boxes):
        if lb.score is None:
            raise ValueError(f"{path}: detection record without a score")
        dets.append(Detection(box=box, score=lb.score, label=lb.type))
    return dets
