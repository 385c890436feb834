"""End-to-end training loop over scenes.

Per epoch the diffusion time ceiling follows the sine ramp; per scene the
ground truth is repeated to N proposals, corrupted to a shared random time
level, optionally resampled away from point-free regions, decoded, matched
and scored. Randomness is split per (seed, epoch, scene index), so a fixed
seed with single-threaded execution gives bit-identical checkpoints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config, config_to_text
from .decoder import decoder_backward, decoder_forward, init_params, save_checkpoint
from .features import build_bev_features, roi_pool_rotated
from .matching import Assignment, hungarian, match_cost_matrix, training_loss
from .optim import AdamWState, adamw_step, one_cycle_lr
from .proposals import corrupt, dynamic_t_max, pad_gt_to_n, resample_empty


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries a diagnostic state dump."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)  # per-epoch dicts
    config: Config | None = None


_INIT_STREAM = 0xFFFFFFFF  # epoch namespace reserved for parameter init


def _scene_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def train_scene_step(cfg: Config, scene, params, epoch: int, t_ceiling: int, rng):
    """One forward/backward on a single scene; returns (loss result, grads, t)."""
    norm = cfg.normalizer()
    sched = cfg.schedule()
    dcfg = cfg.decoder_config()
    weights = cfg.match_weights()
    rho = cfg.effective_rho()

    gt_bev = scene.gt_bev()
    base_boxes, provenance = pad_gt_to_n(gt_bev, cfg.proposals.n, norm, rng, rho)
    t = int(rng.integers(1, t_ceiling + 1))
    pset = corrupt(base_boxes, t, sched, norm, rng, provenance)
    if cfg.proposals.resample and cfg.proposals.eta > 0:
        pset = resample_empty(pset, scene.points[:, :2], cfg.proposals.eta, norm, rng, rho)

    grid = build_bev_features(scene.points, cfg.grid_config())
    roi = roi_pool_rotated(grid, pset.boxes, dcfg.pool_size)
    out = decoder_forward(params, roi, t, pset.signal, dcfg)

    m = gt_bev.shape[0]
    if m > 0:
        pred_bev = norm.decode(out.x0_signal)
        cost = match_cost_matrix(out.probs, pred_bev, gt_bev, norm, weights)
        assignment = hungarian(cost)
    else:
        assignment = Assignment(pairs=(), unmatched_preds=tuple(range(len(pset))))

    gt_cz = np.array([b.cz for b in scene.boxes], dtype=float)
    gt_dz = np.array([b.dz for b in scene.boxes], dtype=float)
    loss = training_loss(
        out.probs, out.x0_signal, out.cz, out.dz, gt_bev, gt_cz, gt_dz, assignment, norm, weights
    )
    grads, _ = decoder_backward(
        params, out.cache, loss.d_prob, loss.d_signal, loss.d_cz, loss.d_dz, dcfg
    )
    return loss, grads, t


def run_training(
    cfg: Config,
    scenes,
    seed: int = 0,
    out_dir=None,
    epochs: int | None = None,
    log=None,
) -> TrainResult:
    """Train the decoder; writes loss_curve.csv and checkpoint.npz to out_dir."""
    epochs = epochs if epochs is not None else cfg.train.epochs
    time_cfg = cfg.time_config(epochs)
    params = init_params(cfg.decoder_config(), _scene_rng(seed, _INIT_STREAM, 0))
    state = AdamWState()
    total_steps = epochs * len(scenes)
    history = []
    step = 0
    for epoch in range(epochs):
        t_ceiling = dynamic_t_max(epoch, time_cfg)
        sums = {"total": 0.0, "cls": 0.0, "reg": 0.0, "iou": 0.0}
        for idx, scene in enumerate(scenes):
            rng = _scene_rng(seed, epoch, idx)
            lr = one_cycle_lr(
                step, total_steps, peak_lr=cfg.train.lr, warmup_frac=cfg.train.warmup_frac
            )
            try:
                loss, grads, t = train_scene_step(cfg, scene, params, epoch, t_ceiling, rng)
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    str(exc),
                    dump=_diagnostic_dump(params, epoch, scene.scene_id, step, lr),
                ) from exc
            if not np.isfinite(loss.total):
                raise TrainingDiverged(
                    f"non-finite loss {loss.total} (terms {loss.terms})",
                    dump=_diagnostic_dump(params, epoch, scene.scene_id, step, lr),
                )
            params = adamw_step(
                params, grads, state, lr, weight_decay=cfg.train.weight_decay
            )
            sums["total"] += loss.total
            for k in ("cls", "reg", "iou"):
                sums[k] += loss.terms[k]
            step += 1
        row = {
            "epoch": epoch,
            "t_ceiling": t_ceiling,
            "lr": one_cycle_lr(step - 1, total_steps, peak_lr=cfg.train.lr, warmup_frac=cfg.train.warmup_frac),
        }
        row.update({k: v / len(scenes) for k, v in sums.items()})
        history.append(row)
        if log is not None:
            log(
                f"epoch {epoch:3d}  t_max {t_ceiling:4d}  "
                f"loss {row['total']:.4f}  (cls {row['cls']:.4f} reg {row['reg']:.4f} iou {row['iou']:.4f})"
            )

    result = TrainResult(params=params, history=history, config=cfg)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_loss_curve(out_dir / "loss_curve.csv", history)
        save_checkpoint(out_dir / "checkpoint.npz", params, config_to_text(cfg))
    return result


def write_loss_curve(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "t_ceiling", "total", "cls", "reg", "iou", "lr"]
        )
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in writer.fieldnames})


def _diagnostic_dump(params, epoch, scene_id, step, lr) -> dict:
    return {
        "epoch": epoch,
        "scene_id": scene_id,
        "step": step,
        "lr": lr,
        "param_max_abs": {k: float(np.max(np.abs(v))) for k, v in params.items()},
    }
