"""Report figures (PNG) written next to the tab-separated outputs.

Figures are drawn on standalone Agg canvases, never through pyplot's global
state, and saved without software/date metadata so reruns are byte-identical.
"""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

FONT_SIZE = 9
TARGET_COLOR = "firebrick"
OTHER_COLOR = "0.6"


def new_figure(figsize=(6.0, 3.6), nrows=1, ncols=1):
    fig = Figure(figsize=figsize, dpi=100)
    FigureCanvasAgg(fig)
    axes = fig.subplots(nrows, ncols, squeeze=False)
    for ax in axes.flat:
        ax.tick_params(labelsize=FONT_SIZE)
    return fig, axes


def save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None}, dpi=100)


def training_curves(log_rows, path, title=None):
    """Loss and validation IoU per epoch."""
    rows = np.asarray(log_rows, dtype=np.float64).reshape(-1, 4)
    fig, axes = new_figure(figsize=(7.0, 3.0), ncols=2)
    ax_loss, ax_iou = axes[0]
    ax_loss.plot(rows[:, 0], rows[:, 1], color="k", lw=1.2)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean loss")
    ax_iou.plot(rows[:, 0], rows[:, 3], color=TARGET_COLOR, lw=1.2, marker="o", ms=2)
    ax_iou.set_xlabel("epoch")
    ax_iou.set_ylabel("validation IoU")
    ax_iou.set_ylim(-0.02, 1.02)
    if title:
        fig.suptitle(title)
    save(fig, path)


def event_scatter(stream, labels, path, title=None, max_points=50_000):
    """x-t and y-t projections coloured by a per-event binary mask."""
    lab = np.asarray(labels).astype(bool)
    n = len(stream)
    idx = np.arange(n)
    if n > max_points:
        idx = np.linspace(0, n - 1, max_points).astype(np.int64)
    t_ms = (stream.t[idx] - (stream.t[0] if n else 0)) / 1000.0
    fig, axes = new_figure(figsize=(7.0, 3.2), ncols=2)
    for ax, coord, name in ((axes[0][0], stream.x, "x [px]"), (axes[0][1], stream.y, "y [px]")):
        sel = lab[idx]
        ax.scatter(t_ms[~sel], coord[idx][~sel], s=0.3, c=OTHER_COLOR, linewidths=0, rasterized=True)
        ax.scatter(t_ms[sel], coord[idx][sel], s=0.8, c=TARGET_COLOR, linewidths=0, rasterized=True)
        ax.set_xlabel("t [ms]")
        ax.set_ylabel(name)
    if title:
        fig.suptitle(title)
    save(fig, path)


def metric_bars(names, rows, path, metrics=("iou", "acc", "pd"), title=None):
    """Grouped bars of the chosen metrics, one group per configuration."""
    rows = [dict(r) for r in rows]
    x = np.arange(len(names))
    width = 0.8 / max(len(metrics), 1)
    fig, axes = new_figure(figsize=(max(4.0, 0.9 * len(names) + 2), 3.4))
    ax = axes[0][0]
    for i, m in enumerate(metrics):
        ax.bar(x + (i - (len(metrics) - 1) / 2) * width, [r[m] for r in rows], width, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False, ncols=len(metrics))
    if title:
        ax.set_title(title)
    save(fig, path)


def frame_image(image, path, boxes=()):
    """One accumulated frame with optional boxes ``(x_min, y_min, x_max, y_max)``."""
    fig, axes = new_figure(figsize=(5.0, 4.0))
    ax = axes[0][0]
    ax.imshow(np.asarray(image), cmap="gray_r", interpolation="nearest", origin="upper")
    for x0, y0, x1, y1 in boxes:
        ax.add_patch(_rect(x0, y0, x1, y1))
    ax.set_xlabel("x [px]")
    ax.set_ylabel("y [px]")
    save(fig, path)


def _rect(x0, y0, x1, y1):
    from matplotlib.patches import Rectangle
    return Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0, fill=False, ec=TARGET_COLOR, lw=1)
