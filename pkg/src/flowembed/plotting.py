"""Matplotlib figures written next to the CSV / netpbm report outputs."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated renders byte-stable
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return str(path)


def plot_curves(records, path, title=""):
    """Loss (left) and dice (right) per epoch for one or more named RunRecords."""
    fig, (ax_l, ax_d) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name, rec in records.items():
        if rec.losses:
            ax_l.plot(np.arange(1, len(rec.losses) + 1), rec.losses, label=name)
        if rec.dice:
            e, d = zip(*rec.dice)
            ax_d.plot(e, d, marker="o", label=name)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("loss")
    ax_d.set_xlabel("epoch")
    ax_d.set_ylabel("test dice")
    ax_d.set_ylim(0, 1)
    for ax in (ax_l, ax_d):
        if ax.lines:
            ax.legend(fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_dice(pair_ids, scores, path):
    """Per-pair dice bars with the mean as a horizontal line."""
    fig, ax = plt.subplots(figsize=(max(4, 0.25 * len(scores)), 3))
    ax.bar(np.arange(len(scores)), scores, color="tab:blue")
    if len(scores):
        ax.axhline(float(np.mean(scores)), color="k", ls="--", lw=1, label=f"mean {np.mean(scores):.3f}")
        ax.legend(fontsize=8)
    ax.set_xticks(np.arange(len(scores)))
    ax.set_xticklabels(pair_ids, rotation=90, fontsize=6)
    ax.set_ylim(0, 1)
    ax.set_ylabel("dice")
    fig.tight_layout()
    return _save(fig, path)


def plot_panels(panels, path, ncols=4):
    """Grid of named images; 2-D arrays use a gray colormap, H x W x 3 are shown as RGB."""
    n = len(panels)
    if n == 0:
        raise ValueError("nothing to plot")
    ncols = min(ncols, n)
    nrows = -(-n // ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.6 * ncols, 2.8 * nrows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (name, img) in zip(axes.ravel(), panels.items()):
        img = np.asarray(img)
        if img.ndim == 2:
            vmax = 255 if img.dtype == np.uint8 else 1
            ax.imshow(img, cmap="gray", vmin=0, vmax=vmax, interpolation="nearest")
        else:
            ax.imshow(img, interpolation="nearest")
        ax.set_title(name, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
