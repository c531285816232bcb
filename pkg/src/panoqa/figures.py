"""Report figures, rendered headlessly to files.

Every function takes plain data plus an output path, draws one figure with
the Agg backend, writes it, and returns the path. Nothing here touches the
model; the CLI feeds these from the CSV/JSON it has already written so the
figures always agree with the delimited output next to them.
"""

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import logistic
from .selection import COMBINATIONS

AUX_COLORS = {"range": "tab:orange", "type": "tab:green", "degree": "tab:red"}


def _combo_labels():
    return ["+".join(str(i + 1) for i in combo) for combo in COMBINATIONS]


def _read_log(path):
    """Parse a training log CSV into {column: list}, blanks as None."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for key in rows[0]:
        col = []
        for row in rows:
            cell = row[key]
            col.append(float(cell) if cell not in ("", None) else None)
        out[key] = col
    return out


def _plot_optional(ax, epochs, values, **kw):
    pts = [(e, v) for e, v in zip(epochs, values) if v is not None]
    if pts:
        ax.plot([p[0] for p in pts], [p[1] for p in pts], **kw)
    return bool(pts)


def training_curves(log_path, out_path):
    """Loss, uncertainty, and validation trajectories from a training log."""
    log = _read_log(log_path)
    epochs = log["epoch"]

    fig, axes = plt.subplots(3, 1, figsize=(7, 9), sharex=True)

    ax = axes[0]
    _plot_optional(ax, epochs, log["loss_main"], label="main", color="tab:blue")
    for task, col in (("range", "loss_r"), ("type", "loss_t"), ("degree", "loss_d")):
        _plot_optional(ax, epochs, log[col], label=task, color=AUX_COLORS[task])
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title("training losses")

    ax = axes[1]
    _plot_optional(ax, epochs, log["sigma_main"], label="main", color="tab:blue")
    for task, col in (("range", "sigma_r"), ("type", "sigma_t"), ("degree", "sigma_d")):
        _plot_optional(ax, epochs, log[col], label=task, color=AUX_COLORS[task])
    ax.set_ylabel("sigma")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title("uncertainty weights")

    ax = axes[2]
    drew = _plot_optional(ax, epochs, log["val_plcc"], label="PLCC", color="tab:purple")
    drew |= _plot_optional(ax, epochs, log["val_srcc"], label="SRCC", color="tab:brown")
    ax.set_ylabel("validation")
    ax.set_xlabel("epoch")
    if drew:
        ax.legend(loc="lower right", fontsize=8)
    else:
        ax.text(0.5, 0.5, "no validation split", ha="center", va="center",
                transform=ax.transAxes, fontsize=9, color="gray")
    ax.set_title("validation correlation")

    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def prediction_scatter(scores, mos, fit_params, out_path, score_range=None):
    """Raw scores against target MOS with the fitted logistic overlaid."""
    scores = np.asarray(scores, dtype=np.float64)
    mos = np.asarray(mos, dtype=np.float64)

    fig, ax = plt.subplots(figsize=(5.5, 5))
    ax.scatter(scores, mos, s=18, alpha=0.6, edgecolors="none", color="tab:blue")
    if fit_params is not None and scores.std() > 0:
        xs = np.linspace(scores.min(), scores.max(), 200)
        ax.plot(xs, logistic(xs, *fit_params), color="tab:red", label="logistic fit")
        ax.legend(loc="best", fontsize=8)
    if score_range is not None:
        ax.set_ylim(score_range[0] - 0.2, score_range[1] + 0.2)
    ax.set_xlabel("model score")
    ax.set_ylabel("MOS")
    ax.set_title("predictions vs MOS")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def selection_histogram(hist, out_path):
    """Bar chart of chosen level combinations, one series per task.

    hist maps task name -> 15 counts aligned with the combination list.
    """
    labels = _combo_labels()
    tasks = list(hist)
    x = np.arange(len(labels))
    width = 0.8 / max(len(tasks), 1)

    fig, ax = plt.subplots(figsize=(9, 4))
    for i, task in enumerate(tasks):
        counts = hist[task]
        if len(counts) != len(labels):
            raise ValueError(
                f"task {task!r} has {len(counts)} bins, expected {len(labels)}"
            )
        ax.bar(x + (i - (len(tasks) - 1) / 2) * width, counts, width, label=task)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_xlabel("level combination")
    ax.set_ylabel("times chosen")
    ax.set_title("feature selection choices")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def ablation_bars(rows, out_path, metric="srcc"):
    """One bar per ablation row; rows are dicts with `label` and the metric."""
    labels = [r["label"] for r in rows]
    values = [r.get(metric) for r in rows]
    plotted = [(l, v) for l, v in zip(labels, values) if v is not None]
    if not plotted:
        raise ValueError("no rows carry the requested metric")

    fig, ax = plt.subplots(figsize=(max(5.0, 0.9 * len(plotted)), 4))
    ax.bar([p[0] for p in plotted], [p[1] for p in plotted], color="tab:blue")
    ax.set_ylabel(metric.upper())
    ax.set_xlabel("configuration")
    ax.set_title("ablation")
    for tick in ax.get_xticklabels():
        tick.set_rotation(30)
        tick.set_ha("right")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
