"""Matplotlib figures written next to the CSV artifacts."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MODE_COLORS = {"text": "tab:blue", "eeg": "tab:orange", "text+eeg": "tab:green", "noise": "tab:gray"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss(loss_csv, eval_csv=None, path="loss.png", smooth: int = 25) -> Path:
    """Per-step training loss (running mean, by mode) and fixed-batch eval loss."""
    with open(loss_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for mode in dict.fromkeys(r["mode"] for r in rows):
        sel = [r for r in rows if r["mode"] == mode]
        x = np.array([int(r["step"]) for r in sel])
        y = np.array([float(r["loss"]) for r in sel])
        k = max(1, min(smooth, len(y)))
        ys = np.convolve(y, np.ones(k) / k, mode="valid")
        ax.plot(x[k - 1:], ys, lw=1, color=MODE_COLORS.get(mode), label=f"train {mode}")
    if eval_csv and Path(eval_csv).exists():
        with open(eval_csv, newline="") as fh:
            ev = list(csv.DictReader(fh))
        for mode in dict.fromkeys(r["mode"] for r in ev):
            sel = [r for r in ev if r["mode"] == mode]
            ax.plot([int(r["step"]) for r in sel], [float(r["loss"]) for r in sel], "o--", ms=3,
                    color=MODE_COLORS.get(mode), label=f"eval {mode}")
    ax.set_xlabel("step")
    ax.set_ylabel("flow-matching loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_samples(grids: dict, classes: int, n: int, path="samples.png", max_cols: int = 8) -> Path:
    """One panel row per (mode, class); up to ``max_cols`` samples each."""
    cols = min(n, max_cols)
    nrows = len(grids) * classes
    fig, axes = plt.subplots(nrows, cols, figsize=(cols * 0.9, nrows * 0.9), squeeze=False)
    for m, (mode, imgs) in enumerate(grids.items()):
        for k in range(classes):
            for j in range(cols):
                ax = axes[m * classes + k, j]
                ax.imshow(imgs[k * n + j], interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if j == 0:
                    ax.set_ylabel(f"{mode}\n{k}", fontsize=6)
    return _save(fig, path)


def plot_metrics(rows, path="metrics.png") -> Path:
    """Bar charts of probe accuracy and L1 by mode."""
    vals = {r[0]: r[1] for r in rows}
    modes = list(dict.fromkeys(m.rsplit(".", 1)[0] for m in vals))
    fig, axes = plt.subplots(1, 2, figsize=(7, 3))
    for ax, metric in zip(axes, ("acc", "l1")):
        ys = [vals.get(f"{m}.{metric}", np.nan) for m in modes]
        ax.bar(modes, ys, color=[MODE_COLORS.get(m, "tab:purple") for m in modes])
        ax.set_title(metric)
        ax.tick_params(axis="x", labelsize=7)
    return _save(fig, path)
