"""Figures written next to the tabular outputs: overlays, metric box plots, curves."""
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.image import imsave

TP_COLOR = (0, 255, 0)
FN_COLOR = (255, 0, 0)
FP_COLOR = (0, 0, 255)

_METRIC_LABELS = {"dsc": "DSC", "hd95": "HD95 (mm)", "avd": "AVD (%)",
                  "lesion_recall": "Lesion recall", "lesion_f1": "Lesion F1"}


def grayscale(image: np.ndarray) -> np.ndarray:
    lo, hi = np.percentile(image, [1, 99]) if image.size else (0.0, 1.0)
    scaled = np.clip((image - lo) / (hi - lo), 0, 1) if hi > lo else np.zeros_like(image)
    g = (scaled * 255).astype(np.uint8)
    return np.stack([g, g, g], axis=-1)


def overlay_rgb(image, pred, gt) -> np.ndarray:
    """Grayscale slice with TP green, FN red and FP blue."""
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    rgb = grayscale(np.asarray(image, dtype=np.float64))
    rgb[pred & gt] = TP_COLOR
    rgb[~pred & gt] = FN_COLOR
    rgb[pred & ~gt] = FP_COLOR
    return rgb


def count_colors(rgb) -> dict:
    return {name: int(np.all(rgb == c, axis=-1).sum())
            for name, c in (("tp", TP_COLOR), ("fn", FN_COLOR), ("fp", FP_COLOR))}


def save_overlays(image, pred, gt, out_dir, prefix="slice"):
    """One PNG per axial slice of [D,H,W] arrays; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for z in range(image.shape[0]):
        p = out / f"{prefix}_{z:03d}.png"
        imsave(p, overlay_rgb(image[z], pred[z], gt[z]))
        paths.append(p)
    return paths


def metric_boxplots(report, out_dir, metrics=("dsc", "hd95", "avd", "lesion_recall", "lesion_f1")):
    """One figure per class: a box per metric over cases (sentinel values left out)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for cls in report.summary:
        rows = [c for c in report.cases if c.class_name == cls]
        fig = Figure(figsize=(2.2 * len(metrics), 3.2))
        FigureCanvasAgg(fig)
        for i, m in enumerate(metrics):
            ax = fig.add_subplot(1, len(metrics), i + 1)
            vals = [getattr(r, m) for r in rows if not r.excluded(m)]
            if vals:
                ax.boxplot(vals)
            ax.set_title(_METRIC_LABELS.get(m, m), fontsize=9)
            ax.set_xticks([])
        fig.suptitle(cls)
        fig.tight_layout()
        p = out / f"boxplot_{cls}.png"
        fig.savefig(p, dpi=100)
        paths.append(p)
    return paths


def training_curves(history, path):
    epochs = [h["epoch"] for h in history]
    fig = Figure(figsize=(6, 3))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(1, 2, 1)
    ax.plot(epochs, [h["loss"] for h in history], marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax = fig.add_subplot(1, 2, 2)
    val = [(h["epoch"], h["val_dsc"]) for h in history if h.get("val_dsc") is not None]
    if val:
        ax.plot(*zip(*val), marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("val DSC")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    return Path(path)
