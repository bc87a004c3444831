"""Figure rendering for run artifacts.

Every CSV a run emits gets a rendered PNG next to it: training curves,
per-horizon metric comparisons, silhouette-by-scale bars, adjacency-family
heatmaps, and sample forecast traces. Rendering is headless (Agg) and never
required for the numeric outputs to exist.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIGSIZE = (6.4, 4.0)
DPI = 130


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def _read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def render_pretrain_curve(curve_csv: str | Path, out: str | Path) -> Path:
    rows = _read_csv(curve_csv)
    epochs = [int(r["epoch"]) for r in rows]
    rmse = [float(r["heldout_rmse"]) for r in rows]
    train = [float(r["train_loss"]) for r in rows]
    fig, ax1 = plt.subplots(figsize=FIGSIZE)
    ax1.plot(epochs, rmse, "o-", color="tab:blue", label="held-out RMSE")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("held-out masked RMSE", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(epochs, train, "s--", color="tab:orange", label="train loss")
    ax2.set_ylabel("train loss (normalized)", color="tab:orange")
    ax1.set_title("masked reconstruction pretraining")
    return _save(fig, out)


def render_loss_trace(trace_csv: str | Path, column: str,
                      out: str | Path) -> Path:
    rows = _read_csv(trace_csv)
    if not rows:
        fig, ax = plt.subplots(figsize=FIGSIZE)
        ax.set_title("empty trace")
        return _save(fig, out)
    epochs = [int(r["epoch"]) for r in rows]
    vals = [float(r[column]) for r in rows]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(epochs, vals, "o-")
    ax.set_xlabel("epoch")
    ax.set_ylabel(column)
    ax.set_title(Path(trace_csv).stem.replace("_", " "))
    return _save(fig, out)


def render_cluster_report(rep, out: str | Path) -> Path:
    scales = sorted(rep.per_scale)
    sil = [rep.per_scale[c].silhouette for c in scales]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.bar([str(c) for c in scales], sil, color="tab:green")
    ax.set_xlabel("pattern scale (patches)")
    ax.set_ylabel("silhouette (cosine)")
    ax.set_title("cluster quality by scale")
    return _save(fig, out)


def render_metrics_comparison(reports: dict, out: str | Path) -> Path:
    """Grouped bars of RMSE per horizon for several labelled reports."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    names = list(reports)
    horizons = [r.horizon_minutes for r in reports[names[0]].rows]
    width = 0.8 / max(len(names), 1)
    xs = np.arange(len(horizons))
    for i, name in enumerate(names):
        vals = [row.rmse for row in reports[name].rows]
        ax.bar(xs + i * width, vals, width, label=name)
    ax.set_xticks(xs + width * (len(names) - 1) / 2)
    ax.set_xticklabels([f"{h} min" for h in horizons])
    ax.set_ylabel("RMSE")
    ax.set_title("forecast error by horizon")
    ax.legend()
    return _save(fig, out)


def render_forecast_examples(windows, preds: np.ndarray, interval: int,
                             out: str | Path, max_nodes: int = 3) -> Path:
    w = windows[0]
    n = min(max_nodes, w.Y.shape[0])
    T = w.Y.shape[1]
    minutes = (np.arange(T) + 1) * interval
    fig, axes = plt.subplots(n, 1, figsize=(FIGSIZE[0], 2.0 * n), sharex=True)
    axes = np.atleast_1d(axes)
    for i in range(n):
        axes[i].plot(minutes, w.Y[i, :, 0], "k-", label="truth")
        axes[i].plot(minutes, preds[0, i, :, 0], "--", color="tab:purple",
                     label="forecast")
        axes[i].set_ylabel(f"node {i}")
        if i == 0:
            axes[i].legend(loc="upper right", fontsize=8)
    axes[-1].set_xlabel("lead time (minutes)")
    fig.suptitle(f"forecasts from origin step {w.origin}")
    return _save(fig, out)


def render_adjacency_heatmaps(matrices_dir: str | Path, out: str | Path) -> Path:
    matrices_dir = Path(matrices_dir)
    names = ["A", "A_attention", "A_hat", "A_operator"]
    mats = []
    for name in names:
        p = matrices_dir / f"{name}.csv"
        if p.exists():
            mats.append((name, np.atleast_2d(
                np.genfromtxt(p, delimiter=","))))
    fig, axes = plt.subplots(1, len(mats), figsize=(3.0 * len(mats), 3.2))
    axes = np.atleast_1d(axes)
    for ax, (name, mat) in zip(axes, mats):
        show = mat.copy()
        np.fill_diagonal(show, 0.0)
        im = ax.imshow(show, cmap="viridis")
        ax.set_title(name)
        fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, out)
