"""Static figures for the CLI reports.

Everything renders through an Agg canvas owned by the figure (no pyplot
state), and files are written via a temporary name then renamed.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .inference import PALETTE
from .synthetic import class_to_fdi


def _new_figure(width=6.0, height=4.0):
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig


def save_figure(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.stem}.", suffix=path.suffix)
    os.close(fd)
    try:
        # fixed metadata keeps reruns byte-identical
        fig.savefig(tmp, format=path.suffix.lstrip(".") or "png", metadata={"Software": None})
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def curvature_map(centroids, values, path, title="", label=""):
    """Top-down scatter of face centroids colored by a per-face scalar."""
    centroids = np.asarray(centroids)
    values = np.asarray(values)
    fig = _new_figure(6.0, 5.0)
    ax = fig.add_subplot(1, 1, 1)
    lo, hi = np.percentile(values, [1, 99]) if len(values) else (0.0, 1.0)
    sc = ax.scatter(centroids[:, 0], centroids[:, 1], c=values, s=2, cmap="viridis",
                    vmin=lo, vmax=hi if hi > lo else lo + 1e-12, linewidths=0)
    fig.colorbar(sc, ax=ax, label=label)
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title(title)
    fig.tight_layout()
    return save_figure(fig, path)


def label_map(centroids, labels, path, title=""):
    """Top-down scatter of face centroids in the segmentation palette."""
    centroids = np.asarray(centroids)
    fig = _new_figure(6.0, 5.0)
    ax = fig.add_subplot(1, 1, 1)
    ax.scatter(centroids[:, 0], centroids[:, 1], c=PALETTE[np.asarray(labels)], s=2,
               linewidths=0)
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.tight_layout()
    return save_figure(fig, path)


def loss_curves(history: list[dict], path, title="training loss"):
    steps = [h["step"] for h in history]
    fig = _new_figure()
    ax = fig.add_subplot(1, 1, 1)
    for key in ("L_total", "L_seg", "L_aux"):
        ax.plot(steps, [h[key] for h in history], label=key, linewidth=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(steps, [h["L_geo"] for h in history], color="0.5", linewidth=0.8, label="L_geo")
    ax2.set_ylabel("L_geo (summed)")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [l.get_label() for l in lines], loc="upper right", fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    return save_figure(fig, path)


def class_iou_bars(per_class_iou: list, path, title="per-class IoU"):
    """Bar per present class, labeled by FDI code (0 for gingiva)."""
    present = [(c, v) for c, v in enumerate(per_class_iou) if v is not None]
    fig = _new_figure(9.0, 3.5)
    ax = fig.add_subplot(1, 1, 1)
    if present:
        cls, vals = zip(*present)
        x = np.arange(len(cls))
        ax.bar(x, vals, color=PALETTE[list(cls)], edgecolor="0.3", linewidth=0.5)
        ax.set_xticks(x)
        ax.set_xticklabels([str(class_to_fdi(c)) if c else "0" for c in cls], rotation=90, fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_xlabel("FDI tooth (0 = gingiva)")
    ax.set_ylabel("IoU")
    ax.set_title(title)
    fig.tight_layout()
    return save_figure(fig, path)


def arm_bars(scores: dict, path, ylabel="validation mIoU", title=""):
    """One bar per named arm, value printed on top."""
    names = list(scores)
    vals = [scores[n] for n in names]
    fig = _new_figure(5.0, 3.5)
    ax = fig.add_subplot(1, 1, 1)
    bars = ax.bar(names, vals, color="0.6", edgecolor="0.2", linewidth=0.5)
    for b, v in zip(bars, vals):
        ax.annotate(f"{v:.3f}", (b.get_x() + b.get_width() / 2, v), ha="center", va="bottom",
                    fontsize=8)
    ax.set_ylim(0, max(1.0, max(vals, default=0) * 1.1))
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    return save_figure(fig, path)
