"""Figures written next to the JSON/text reports: loss curves, metric bars, depth and voxel previews."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def _series(history, key):
    pts = [(r["epoch"], r[key]) for r in history if r.get(key) is not None and np.isfinite(r[key])]
    return np.array(pts).T if pts else (np.array([]), np.array([]))


def plot_stage1_history(history, path):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        for ax, key, title in ((axes[0], "l_depth", "masked depth loss"), (axes[1], "l_mask", "mask loss")):
            for k, style, label in ((key, "-", "train"), (f"val_{key}", "--", "validation")):
                x, y = _series(history, k)
                if len(x):
                    ax.plot(x, y, style, label=label)
            ax.set_yscale("log")
            ax.set_xlabel("epoch")
            ax.set_title(title)
            ax.legend()
        # phase changes of the loss weights
        for r0, r1 in zip(history, history[1:]):
            if (r0.get("alpha"), r0.get("beta")) != (r1.get("alpha"), r1.get("beta")):
                for ax in axes:
                    ax.axvline(r1["epoch"], color="0.7", lw=0.8)
        return _save(fig, path)


def plot_stage2_history(history, path):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3))
        x, y = _series(history, "l_bce")
        axes[0].plot(x, y)
        axes[0].set_title("weighted BCE")
        for key, label in (("l_g", "generator"), ("l_d", "critic")):
            x, y = _series(history, key)
            axes[1].plot(x, y, label=label)
        axes[1].set_title("adversarial losses")
        axes[1].legend()
        x, y = _series(history, "iou_val")
        axes[2].plot(x, y)
        axes[2].set_ylim(0, 1)
        axes[2].set_title("validation IoU")
        for ax in axes:
            ax.set_xlabel("epoch")
        return _save(fig, path)


def plot_history(history, path):
    stage = next((r.get("stage") for r in history if "stage" in r), 1)
    return (plot_stage2_history if stage == 2 else plot_stage1_history)(history, path)


def plot_metrics(report, path):
    """Grouped bars of each metric per fold, with the fold mean as a black tick."""
    cols = report.columns()
    if not cols:
        raise ValueError("report has no metric columns to plot")
    folds = report.per_fold
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(cols), 3))
        width = 0.8 / max(len(folds), 1)
        pos = np.arange(len(cols))
        for i, f in enumerate(folds):
            vals = [f.get(c) if f.get(c) is not None else np.nan for c in cols]
            ax.bar(pos - 0.4 + width * (i + 0.5), vals, width, label=str(f.get("fold", i)))
        ax.scatter(pos, [getattr(report, c) for c in cols], marker="_", s=400, color="k", zorder=3, label="mean")
        if "nn_baseline_mean" in report.extras and "nn" in cols:
            ax.hlines(report.extras["nn_baseline_mean"], pos[0] - 0.45, pos[0] + 0.45, colors="r", linestyles=":",
                      label="NN chance")
        ax.set_xticks(pos)
        ax.set_xticklabels([c.upper().replace("MEAN_", "") for c in cols])
        ax.legend(fontsize=7, ncol=2)
        return _save(fig, path)


def plot_depth_pair(pair, path, title=None):
    """Depth and mask side by side; ``pair`` is a (2, H, W) array."""
    pair = np.asarray(pair)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(5, 2.6))
        for ax, img, name in zip(axes, pair, ("depth", "mask")):
            ax.imshow(img, cmap="gray", vmin=0, vmax=1)
            ax.set_title(name)
            ax.axis("off")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_voxels(grid, path, threshold=0.5, title=None):
    """Three axis-aligned occupancy projections of a voxel grid."""
    occ = np.asarray(grid) >= threshold
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(7, 2.6))
        for ax, axis, name in zip(axes, (2, 1, 0), ("front (xy)", "top (xz)", "side (yz)")):
            proj = occ.any(axis=axis).T  # grids are indexed (x, y, z)
            ax.imshow(proj, cmap="Greys", origin="lower", vmin=0, vmax=1)
            ax.set_title(name)
            ax.axis("off")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_comparison(posed, predicted, target, path, ids=None, max_rows=6):
    """Rows of (posed depth, predicted canonical depth, true canonical depth)."""
    n = min(len(posed), max_rows)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, 3, figsize=(5.5, 1.9 * n), squeeze=False)
        for i in range(n):
            for j, (img, name) in enumerate(((posed[i], "posed"), (predicted[i], "predicted"), (target[i], "target"))):
                axes[i, j].imshow(np.asarray(img)[0], cmap="gray", vmin=0, vmax=1)
                axes[i, j].axis("off")
                if i == 0:
                    axes[i, j].set_title(name)
            if ids is not None:
                axes[i, 0].text(-2, 0, str(ids[i]), fontsize=7, ha="right", va="top")
        return _save(fig, path)


def save_grayscale(img, path):
    """8-bit grayscale preview of a [0, 1] image."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(path, np.clip(np.asarray(img, dtype=np.float64), 0, 1), cmap="gray", vmin=0, vmax=1)
    return path
