"""Static SVG figures for score series, training curves and benchmark ranks.

Figures are written with the non-interactive Agg canvas and a fixed SVG
hash salt so that identical inputs give identical files.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.dates as mdates  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "tsgan",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (7.0, 3.0),
}

SCORE_GID = "anomaly-scores"


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_scores(series, path, threshold: Optional[float] = None, spans: Sequence = (),
                title: str = "") -> Path:
    """Anomaly score against window start time.

    Every window is drawn as its own marker inside a group whose id is
    ``SCORE_GID``; the threshold is a dashed horizontal line and labelled
    anomaly spans are shaded.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        times = mdates.date2num(list(series.start_time))
        line, = ax.plot(times, series.scores, color="tab:blue", marker="o", markersize=2.5,
                        linewidth=1.0, label="anomaly score")
        line.set_gid(SCORE_GID)
        if threshold is not None and np.isfinite(threshold):
            ax.axhline(threshold, color="tab:red", linestyle="--", linewidth=1.0,
                       label=f"threshold {threshold:.4g}", gid="threshold")
        for k, span in enumerate(spans):
            ax.axvspan(mdates.date2num(span.begin), mdates.date2num(span.end), color="tab:orange",
                       alpha=0.3, linewidth=0, label="labelled anomaly" if k == 0 else None,
                       gid=f"span-{k}")
        ax.xaxis.set_major_formatter(mdates.DateFormatter("%Y-%m-%d\n%H:%M"))
        ax.set_ylabel("score")
        if title:
            ax.set_title(title)
        ax.legend(loc="upper left", frameon=False)
        return _save(fig, path)


def plot_training(stats, path, title: str = "") -> Path:
    epochs = [e.epoch for e in stats.epochs]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, [e.d_loss_real for e in stats.epochs], marker=".", label="D loss (real)")
        ax.plot(epochs, [e.d_loss_fake for e in stats.epochs], marker=".", label="D loss (fake)")
        ax.plot(epochs, [e.g_loss for e in stats.epochs], marker=".", label="G loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_rank_sums(table, path, metric: str = "f1") -> Path:
    models = table.models()
    sums = [table.rank_sums[(m, metric)] for m in models]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 0.5 + 0.4 * len(models)))
        ax.barh(models, sums, color="tab:gray")
        ax.invert_yaxis()
        ax.set_xlabel(f"cumulative {metric} rank (lower is better)")
        return _save(fig, path)


def plot_pairwise(reports, model_a: str, model_b: str, path, metric: str = "f1") -> Path:
    """Per-dataset metric of one model against another, with the diagonal."""
    by_cell = {(r.model, r.dataset): r.metric(metric) for r in reports}
    datasets = sorted({d for m, d in by_cell if m == model_a})
    xs = [by_cell[(model_a, d)] for d in datasets]
    ys = [by_cell[(model_b, d)] for d in datasets]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.5, 3.5))
        ax.plot([0, 1], [0, 1], color="0.7", linewidth=0.8)
        ax.scatter(xs, ys, s=14, color="tab:blue")
        ax.set_xlim(-0.02, 1.02)
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlabel(f"{model_a} {metric}")
        ax.set_ylabel(f"{model_b} {metric}")
        return _save(fig, path)
