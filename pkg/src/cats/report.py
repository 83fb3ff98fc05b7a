"""Text tables and figures for evaluation reports and loss curves.

Figures go through the object-oriented Agg API (no pyplot state), so they
can be rendered from worker threads and headless machines alike.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .metrics import MetricsReport

_METRICS = (("dice", "Dice"), ("asd_mm", "ASD (mm)"), ("hd95_mm", "HD95 (mm)"))
_STYLE = {"font.size": 9, "axes.spines.top": False, "axes.spines.right": False}
# keep PNG bytes free of version strings
_PNG_META = {"Software": None}


def _cell(mean: float, std: float, digits: int) -> str:
    if math.isnan(mean):
        return "n/a"
    return f"{mean:.{digits}f} ({std:.{digits}f})"


def summary_table(report: MetricsReport, digits: int = 4) -> str:
    """One row per metric, one column per class plus Avg.; cells read "mean (std)".

    Avg. is the arithmetic mean of the per-class means shown in that row.
    """
    summary = report.summary()
    classes = report.classes
    header = ["Metric"] + [report.name(c) for c in classes] + ["Avg."]
    rows = [header]
    for key, label in _METRICS:
        stats = summary[key]
        means = [stats[c][0] for c in classes]
        finite = [m for m in means if not math.isnan(m)]
        avg = f"{np.mean(finite):.{digits}f}" if finite else "n/a"
        rows.append([label] + [_cell(*stats[c], digits) for c in classes] + [avg])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for j, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _new_figure(size=(5.0, 3.2)) -> Figure:
    fig = Figure(figsize=size, dpi=100, layout="constrained")
    FigureCanvasAgg(fig)
    return fig


def plot_dice_by_class(report: MetricsReport, path) -> Path:
    """Bar chart of mean Dice per class with one-std error bars."""
    import matplotlib
    with matplotlib.rc_context(_STYLE):
        fig = _new_figure()
        ax = fig.add_subplot()
        stats = report.summary()["dice"]
        classes = report.classes
        means = [stats[c][0] for c in classes]
        stds = [stats[c][1] for c in classes]
        x = np.arange(len(classes))
        ax.bar(x, means, yerr=stds, color="#4c72b0", capsize=3, width=0.6)
        ax.set_xticks(x, [report.name(c) for c in classes], rotation=30, ha="right")
        pad = 0.5 + max(0.0, (3 - len(classes)) / 2)  # keep bars narrow when classes are few
        ax.set_xlim(-pad, len(classes) - 1 + pad)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("Dice")
        ax.set_title(f"Mean Dice over {len(report.cases)} case(s)")
        fig.savefig(path, metadata=_PNG_META)
    return Path(path)


def plot_loss_curve(history, path) -> Path:
    """Training loss per step with validation Dice on a second axis."""
    import matplotlib
    arr = np.asarray(history, dtype=float).reshape(-1, 3)
    with matplotlib.rc_context(_STYLE):
        fig = _new_figure()
        ax = fig.add_subplot()
        ax.plot(arr[:, 0], arr[:, 1], color="#4c72b0", lw=1.0, label="train loss")
        ax.set_xlabel("step")
        ax.set_ylabel("Dice loss")
        val = ~np.isnan(arr[:, 2])
        if val.any():
            ax2 = ax.twinx()
            ax2.plot(arr[val, 0], arr[val, 2], "o-", color="#dd8452", ms=3, lw=1.0,
                     label="val Dice")
            ax2.set_ylabel("validation Dice")
            ax2.set_ylim(0, 1.05)
            ax2.spines["right"].set_visible(True)
            lines = ax.get_lines() + ax2.get_lines()
            ax.legend(lines, [ln.get_label() for ln in lines], loc="center right", frameon=False)
        fig.savefig(path, metadata=_PNG_META)
    return Path(path)
