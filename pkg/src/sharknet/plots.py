"""Static PNG renderers for curves, confusion matrices, embeddings and heatmaps."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE_VERSION = 1
_SAVE = {"format": "png", "dpi": 100, "metadata": {"Software": None}}
_PALETTE = plt.get_cmap("tab10")


def _save(fig, path) -> None:
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def render_confusion(cm, path, title: str = "Confusion matrix") -> None:
    counts = np.asarray(cm.counts)
    k = counts.shape[0]
    size = max(3.0, 0.6 * k + 2.0)
    fig, ax = plt.subplots(figsize=(size, size))
    ax.imshow(counts, cmap="Blues", vmin=0, vmax=max(1, counts.max()))
    ax.set_xticks(range(k), cm.class_names, rotation=45, ha="right")
    ax.set_yticks(range(k), cm.class_names)
    ax.set_xlabel("Predicted label")
    ax.set_ylabel("True label")
    ax.set_title(title)
    thresh = counts.max() / 2 if counts.size else 0
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(int(counts[i, j])), ha="center", va="center",
                    color="white" if counts[i, j] > thresh else "black", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def render_curves(curves, path, title: str = "Learning curves") -> None:
    """Accuracy (left) and loss (right) panels; one train/val pair per curve."""
    if not isinstance(curves, (list, tuple)):
        curves = [curves]
    fig, (acc_ax, loss_ax) = plt.subplots(1, 2, figsize=(10, 4))
    for i, curve in enumerate(curves):
        tag = f" (fold {i + 1})" if len(curves) > 1 else ""
        ep = curve.column("epoch")
        col = _PALETTE(i % 10)
        acc_ax.plot(ep, curve.column("train_accuracy"), color=col, label=f"train{tag}")
        acc_ax.plot(ep, curve.column("val_accuracy"), color=col, linestyle="--", label=f"validation{tag}")
        loss_ax.plot(ep, curve.column("train_loss"), color=col, label=f"train{tag}")
        loss_ax.plot(ep, curve.column("val_loss"), color=col, linestyle="--", label=f"validation{tag}")
    for ax, name in ((acc_ax, "accuracy"), (loss_ax, "loss")):
        ax.set_xlabel("epoch")
        ax.set_ylabel(name)
        ax.legend(fontsize=7)
    fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def render_scatter(coords, labels, class_names, path, title: str = "t-SNE embedding") -> list:
    """Scatter coloured by class; returns the legend labels in drawing order."""
    coords = np.asarray(coords)
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(7, 6))
    for k, name in enumerate(class_names):
        sel = labels == k
        ax.scatter(coords[sel, 0], coords[sel, 1], s=8, color=_PALETTE(k % 10), label=name)
    legend = ax.legend(fontsize=8, markerscale=2, loc="best")
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    names = [t.get_text() for t in legend.get_texts()]
    _save(fig, path)
    return names


def diverging_rgba(values: np.ndarray, scale: float) -> np.ndarray:
    """Red for positive, blue for negative, transparent at zero.

    Antisymmetric: negating ``values`` swaps the red and blue channels.
    """
    v = np.zeros_like(values, dtype=np.float64) if scale <= 0 else np.clip(values / scale, -1.0, 1.0)
    a = np.abs(v)
    rgba = np.ones(values.shape + (4,))
    pos, neg = v > 0, v < 0
    rgba[..., 1] = 1.0 - a
    rgba[..., 0] = np.where(neg, 1.0 - a, 1.0)
    rgba[..., 2] = np.where(pos, 1.0 - a, 1.0)
    rgba[..., 3] = a
    return rgba


def _dimmed_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    gray = img @ np.array([0.299, 0.587, 0.114]) if img.ndim == 3 else img
    return 0.15 + 0.5 * gray


def heatmap_row_images(attr, image) -> list:
    """Panels for one explained image: the dimmed original plus one overlay per class."""
    vals = attr.pixels
    scale = float(np.abs(vals).max())
    base = _dimmed_gray(image)
    panels = [np.asarray(image, dtype=np.float64)]
    for k in range(vals.shape[0]):
        over = diverging_rgba(vals[k], scale)
        rgb = np.repeat(base[..., None], 3, axis=-1)
        alpha = over[..., 3:4]
        panels.append(rgb * (1 - alpha) + over[..., :3] * alpha)
    return panels


def render_heatmap(attrs, images, path, row_titles=None) -> tuple:
    """Grid of explained images: one row each, ``1 + K`` columns.

    Colour scale is symmetric and normalised per row to the largest absolute
    attribution.  Returns the (rows, columns) layout.
    """
    if not isinstance(attrs, (list, tuple)):
        attrs, images = [attrs], [images]
    k = attrs[0].pixels.shape[0]
    rows, cols = len(attrs), 1 + k
    fig, axes = plt.subplots(rows, cols, figsize=(1.4 * cols, 1.5 * rows), squeeze=False)
    for r, (attr, img) in enumerate(zip(attrs, images)):
        for c, panel in enumerate(heatmap_row_images(attr, img)):
            ax = axes[r, c]
            ax.imshow(np.clip(panel, 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title("image" if c == 0 else attr.class_names[c - 1], fontsize=6)
        if row_titles is not None:
            axes[r, 0].set_ylabel(row_titles[r], fontsize=6)
    fig.tight_layout()
    _save(fig, path)
    return rows, cols
