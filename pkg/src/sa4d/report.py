"""Report rendering: CSV alongside matplotlib figures for the CLI's train,
eval, and bench reports."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_loss_trace(path, trace):
    """trace: (iters, 4) array of (iter, L2d, L3d, L)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "L2d", "L3d", "L"])
        for row in trace:
            writer.writerow([int(row[0]), f"{row[1]:.8g}", f"{row[2]:.8g}",
                             f"{row[3]:.8g}"])


def plot_loss_trace(path, trace):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(trace[:, 0], trace[:, 1], label="2D identity CE", lw=0.8)
    ax.plot(trace[:, 0], trace[:, 2], label="3D KL regularizer", lw=0.8)
    ax.plot(trace[:, 0], trace[:, 3], label="total", lw=1.2, color="k")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_metrics_csv(path, report):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "miou", "macc"])
        for rec in report.per_frame:
            writer.writerow([rec["frame"], f"{rec['miou']:.6f}", f"{rec['macc']:.6f}"])


def plot_metrics(path, report):
    frames = [r["frame"] for r in report.per_frame]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(frames, [r["miou"] for r in report.per_frame], marker="o", ms=3,
            label="mIoU")
    ax.plot(frames, [r["macc"] for r in report.per_frame], marker="s", ms=3,
            label="mAcc")
    ax.axhline(report.mean_iou, color="gray", lw=0.8, ls="--",
               label=f"mean IoU = {report.mean_iou:.3f}")
    ax.set_xlabel("frame")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False, loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_bench_csv(path, rows):
    """rows: [{"path": str, "frames": int, "seconds": float, "fps": float}]."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "frames", "seconds", "fps"])
        for row in rows:
            writer.writerow([row["path"], row["frames"], f"{row['seconds']:.6f}",
                             f"{row['fps']:.3f}"])


def plot_bench(path, rows):
    fig, ax = plt.subplots(figsize=(5, 4))
    names = [r["path"] for r in rows]
    fps = [r["fps"] for r in rows]
    ax.bar(names, fps, color=["#4477aa", "#ee6677"][:len(rows)])
    ax.set_ylabel("frames / second")
    for i, v in enumerate(fps):
        ax.text(i, v, f"{v:.1f}", ha="center", va="bottom")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
