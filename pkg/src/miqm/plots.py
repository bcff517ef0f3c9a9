"""Matplotlib figures written next to the CSV/JSON reports."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# Fixed metadata keeps PNG bytes stable across runs.
_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_correlations(reports: Sequence, path: str | Path, stat: str = "srcc") -> Path:
    """Grouped bars: one group per dataset, one bar per metric."""
    datasets = list(dict.fromkeys(r.dataset for r in reports))
    metrics = list(dict.fromkeys(r.metric for r in reports))
    table = {(r.dataset, r.metric): getattr(r, stat) for r in reports}
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(datasets) * max(1, len(metrics)) / 2), 3.2))
    width = 0.8 / max(1, len(metrics))
    for j, m in enumerate(metrics):
        xs = [i + (j - (len(metrics) - 1) / 2) * width for i in range(len(datasets))]
        ys = [table.get((d, m), math.nan) for d in datasets]
        ys = [0.0 if not math.isfinite(y) else y for y in ys]
        ax.bar(xs, ys, width=width, label=m)
    ax.set_xticks(range(len(datasets)))
    ax.set_xticklabels(datasets)
    ax.set_ylabel(stat.upper())
    ax.axhline(0.0, color="black", linewidth=0.6)
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def plot_training_log(log_csv: str | Path, path: str | Path) -> Path:
    steps, losses, vsteps, vals = [], [], [], []
    with open(log_csv, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
            if row.get("val_srcc"):
                vsteps.append(int(row["step"]))
                vals.append(float(row["val_srcc"]))
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(steps, losses, linewidth=0.8, label="batch loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if vals:
        ax2 = ax.twinx()
        ax2.plot(vsteps, vals, "o-", color="tab:red", markersize=3, label="val SRCC")
        ax2.set_ylabel("val SRCC")
    return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path: str | Path, x: str = "variant", y: str = "srcc",
                  err: str | None = None) -> Path:
    """Line/marker plot of ``y`` against ``x`` per dataset."""
    datasets = list(dict.fromkeys(r["dataset"] for r in rows))
    fig, ax = plt.subplots(figsize=(5, 3))
    for d in datasets:
        sel = [r for r in rows if r["dataset"] == d]
        xs = [str(r[x]) for r in sel]
        ys = [float(r[y]) for r in sel]
        if err:
            ax.errorbar(xs, ys, yerr=[float(r[err]) for r in sel], marker="o", capsize=3, label=d)
        else:
            ax.plot(xs, ys, marker="o", label=d)
    ax.set_xlabel(x)
    ax.set_ylabel(y.upper())
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_denoise(rows: Sequence[dict], path: str | Path) -> Path:
    """PSNR and E-MAE against noise level, one line per training loss."""
    losses = list(dict.fromkeys(r["loss"] for r in rows))
    fig, axes = plt.subplots(1, 2, figsize=(7, 3))
    for col, ax in zip(("psnr", "e_mae"), axes):
        for loss in losses:
            sel = sorted((r for r in rows if r["loss"] == loss), key=lambda r: float(r["sigma"]))
            vals = [float(r[col]) if r.get(col) not in (None, "") else math.nan for r in sel]
            ax.plot([float(r["sigma"]) for r in sel], vals, marker="o", label=f"{loss} loss")
        ax.set_xlabel("noise sigma (8-bit)")
        ax.set_ylabel(col.upper().replace("_", "-"))
        ax.legend(fontsize=7)
    return _save(fig, path)
