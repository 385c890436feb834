"""Report emission: every artifact is written as a CSV next to a rendered
PNG figure, so results stay grep-able and viewable."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .config import Config
from .proposals import DynamicTimeConfig, correlated_normals, dynamic_t_max
from scipy.special import ndtr


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_schedule_report(out_dir, time_cfg: DynamicTimeConfig):
    """Dynamic time ceiling per epoch: schedule.csv + schedule.png."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = np.arange(time_cfg.epochs)
    ceilings = [dynamic_t_max(int(x), time_cfg) for x in epochs]
    csv_path = out_dir / "schedule.csv"
    _write_csv(csv_path, ["epoch", "t_max"], list(zip(epochs.tolist(), ceilings)))

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, ceilings, lw=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("time ceiling")
    ax.set_title("Diffusion time ceiling over training")
    fig.tight_layout()
    png_path = out_dir / "schedule.png"
    fig.savefig(png_path, dpi=130)
    plt.close(fig)
    return csv_path, png_path


def write_sizes_report(out_dir, rng, n: int = 20000, rho: float = 0.8, size_max_x: float = 8.0, size_max_y: float = 5.0):
    """Raw and scaled size samples, random vs correlation-constrained."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    w_c, l_c = correlated_normals(rng, n, rho)
    w_r, l_r = correlated_normals(rng, n, 0.0)
    rows = []
    for kind, w, l in (("random", w_r, l_r), ("constrained", w_c, l_c)):
        dx = ndtr(w) * size_max_x
        dy = ndtr(l) * size_max_y
        rows += [(kind, w[i], l[i], dx[i], dy[i]) for i in range(n)]
    csv_path = out_dir / "sizes.csv"
    _write_csv(csv_path, ["kind", "w_raw", "l_raw", "dx", "dy"], rows)

    fig, axes = plt.subplots(1, 2, figsize=(8, 3.6), sharex=True, sharey=True)
    for ax, (kind, w, l) in zip(axes, (("random", w_r, l_r), ("constrained", w_c, l_c))):
        ax.scatter(ndtr(w) * size_max_x, ndtr(l) * size_max_y, s=2, alpha=0.15)
        corr = np.corrcoef(w, l)[0, 1]
        ax.set_title(f"{kind} (corr {corr:.2f})")
        ax.set_xlabel("dx (m)")
    axes[0].set_ylabel("dy (m)")
    fig.tight_layout()
    png_path = out_dir / "sizes.png"
    fig.savefig(png_path, dpi=130)
    plt.close(fig)
    return csv_path, png_path


def write_pr_report(out_dir, report):
    """Interpolated PR curves per difficulty from an EvalReport."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, curve in report.curves.items():
        for r, p in zip(curve["recall"], curve["precision"]):
            rows.append((name, "raw", r, p))
        for r, p in zip(curve["interp_recall"], curve["interp_precision"]):
            rows.append((name, "interpolated", r, p))
    csv_path = out_dir / "pr_curve.csv"
    _write_csv(csv_path, ["difficulty", "kind", "recall", "precision"], rows)

    fig, ax = plt.subplots(figsize=(5, 3.6))
    for name, curve in report.curves.items():
        ax.plot(curve["interp_recall"], curve["interp_precision"], marker=".", label=f"{name} ({report.ap[name]:.1f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("interpolated precision")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    ax.set_title(report.summary().split("  ")[0])
    fig.tight_layout()
    png_path = out_dir / "pr_curve.png"
    fig.savefig(png_path, dpi=130)
    plt.close(fig)
    return csv_path, png_path


def write_loss_report(out_dir, loss_csv_path):
    """Render a training loss_curve.csv into loss.png (and copy the CSV)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(loss_csv_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{loss_csv_path} is empty")
    epochs = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for key in ("total", "cls", "reg", "iou"):
        ax.plot(epochs, [float(r[key]) for r in rows], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("Training loss")
    fig.tight_layout()
    png_path = out_dir / "loss.png"
    fig.savefig(png_path, dpi=130)
    plt.close(fig)
    csv_path = out_dir / "loss.csv"
    if Path(loss_csv_path).resolve() != csv_path.resolve():
        csv_path.write_text(Path(loss_csv_path).read_text())
    return csv_path, png_path
