"""Command-line entry points: gen-data, train, infer, eval, plot.

All randomness flows from a single --seed flag per subcommand.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import Config, config_to_text, default_config, load_config, load_config_file
from .data import generate_synthetic_scene, load_scenes, parse_kitti_labels, save_scene
from .data import kitti_to_scene_boxes, label_difficulty
from .decoder import load_checkpoint
from .evaluation import evaluate_ap, gts_from_scenes
from .inference import infer_scene, make_decoder_fn, read_detections, write_detections
from .plots import write_loss_report, write_pr_report, write_schedule_report, write_sizes_report
from .training import run_training


def _load_cfg(path) -> Config:
    return load_config_file(path) if path else default_config()


def _cmd_gen_data(args) -> int:
    cfg = _load_cfg(args.config)
    master = np.random.SeedSequence(args.seed)
    out = Path(args.out)
    for idx, child in enumerate(master.spawn(args.scenes)):
        scene = generate_synthetic_scene(
            np.random.default_rng(child), cfg.synthetic_config(), scene_id=f"{idx:06d}"
        )
        save_scene(out, scene)
    print(f"wrote {args.scenes} scenes to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    scenes = load_scenes(args.data)
    print(f"training on {len(scenes)} scenes from {args.data}")
    result = run_training(
        cfg,
        scenes,
        seed=args.seed,
        out_dir=args.out,
        epochs=args.epochs,
        log=print,
    )
    print(f"checkpoint and loss curve written to {args.out}")
    return 0 if result.params else 1


def _cmd_infer(args) -> int:
    params, cfg_text = load_checkpoint(args.checkpoint)
    cfg = load_config(cfg_text)
    scenes = load_scenes(args.data)
    decode = make_decoder_fn(params, cfg)
    out = Path(args.out)
    if args.final_only:
        cfg.nms.pool_all_steps = False
    for scene in scenes:
        dets = infer_scene(decode, scene, cfg, steps=args.steps, seed=args.seed)
        write_detections(out, scene.scene_id, dets)
    print(f"wrote detections for {len(scenes)} scenes to {out}")
    return 0


def _gts_from_label_dir(gts_dir):
    gts = {}
    for path in sorted(Path(gts_dir).glob("*.txt")):
        labels = [lb for lb in parse_kitti_labels(path.read_text()) if not lb.dont_care]
        boxes = kitti_to_scene_boxes(labels)
        gts[path.stem] = (boxes, [label_difficulty(lb) for lb in labels])
    if not gts:
        raise FileNotFoundError(f"no label files under {gts_dir}")
    return gts


def _cmd_eval(args) -> int:
    gts_dir = Path(args.gts)
    if (gts_dir / "labels").is_dir():
        gts_dir = gts_dir / "labels"
    gts = _gts_from_label_dir(gts_dir)
    dets = {}
    for sid in gts:
        det_path = Path(args.dets) / f"{sid}.txt"
        dets[sid] = read_detections(det_path) if det_path.exists() else []
    report = evaluate_ap(
        dets, gts, iou_threshold=args.iou, recall_positions=args.recall, mode=args.mode
    )
    print(report.summary())
    if args.out:
        csv_path, png_path = write_pr_report(args.out, report)
        print(f"PR curve written to {csv_path} and {png_path}")
    return 0


def _cmd_plot(args) -> int:
    cfg = _load_cfg(args.config)
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    if args.what == "schedule":
        paths = write_schedule_report(out, cfg.time_config())
    elif args.what == "sizes":
        paths = write_sizes_report(
            out,
            rng,
            rho=cfg.proposals.rho,
            size_max_x=cfg.scene.size_max_x,
            size_max_y=cfg.scene.size_max_y,
        )
    elif args.what == "loss":
        src = Path(args.input) if args.input else out / "loss_curve.csv"
        paths = write_loss_report(out, src)
    elif args.what == "pr":
        if not args.input:
            raise SystemExit("plot --what pr needs --in pointing at a detections dir "
                             "(use `eval --out` to produce the PR report directly)")
        gts = _gts_from_label_dir(args.gts)
        dets = {sid: read_detections(Path(args.input) / f"{sid}.txt") for sid in gts}
        report = evaluate_ap(dets, gts, iou_threshold=cfg.eval.iou_threshold,
                             recall_positions=cfg.eval.recall_positions, mode=cfg.eval.mode)
        paths = write_pr_report(out, report)
    else:  # pragma: no cover - argparse restricts choices
        raise SystemExit(f"unknown plot kind {args.what}")
    print("wrote " + " and ".join(str(p) for p in paths))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffbev",
        description="Desk-scale diffusion-driven BEV 3D object detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train the denoising decoder")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("infer", help="run multi-step inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--final-only", action="store_true",
                   help="keep only the last step's decodes instead of pooling all steps")
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("eval", help="evaluate detections against ground truth")
    p.add_argument("--dets", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--iou", type=float, default=0.7)
    p.add_argument("--recall", type=int, choices=(11, 40), default=40)
    p.add_argument("--mode", choices=("3d", "bev"), default="bev")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("plot", help="emit CSV + PNG reports")
    p.add_argument("--what", choices=("schedule", "sizes", "pr", "loss"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--in", dest="input", default=None,
                   help="input artifact (loss_curve.csv for loss, detections dir for pr)")
    p.add_argument("--gts", default=None, help="ground-truth label dir (pr only)")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
