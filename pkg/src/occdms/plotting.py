"""Figures written next to the CSV reports (confusion matrix, FAR/FRR sweep, mode timeline)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pipeline import Mode  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "savefig.dpi": 150,
    # fixed metadata keeps repeated renders byte-stable
    "svg.hashsalt": "occdms",
}

_MODE_LEVEL = {Mode.RGB_PRIMARY: 0, Mode.IR_PRIMARY: 1, Mode.ALERT: 2}


_STABLE_METADATA = {
    ".png": {"Software": None},
    ".svg": {"Date": None},
    ".pdf": {"CreationDate": None},
}


def _save(fig, path):
    metadata = _STABLE_METADATA.get(Path(path).suffix.lower())
    fig.savefig(path, bbox_inches="tight", metadata=metadata)
    plt.close(fig)


def plot_confusion(cm, path, normalize=True, title="Gaze region confusion"):
    """Heat map with ground truth on rows; cells show row-normalized rates."""
    counts = cm.counts.astype(float)
    shown = counts
    if normalize:
        rows = counts.sum(axis=1, keepdims=True)
        shown = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 4.8))
        im = ax.imshow(shown, cmap="Blues", vmin=0, vmax=1 if normalize else None)
        ax.set_xticks(range(cm.n_classes), cm.class_names, rotation=45, ha="right")
        ax.set_yticks(range(cm.n_classes), cm.class_names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(title)
        for i in range(cm.n_classes):
            for j in range(cm.n_classes):
                if counts[i, j]:
                    ax.text(j, i, f"{shown[i, j]:.2f}" if normalize else int(counts[i, j]),
                            ha="center", va="center", fontsize=6,
                            color="white" if shown[i, j] > 0.5 * shown.max() else "black")
        fig.colorbar(im, ax=ax, fraction=0.046)
        _save(fig, path)


def plot_sweep(points, path, title="Identification threshold sweep"):
    t = [p.threshold for p in points]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(t, [p.far for p in points], label="FAR")
        ax.plot(t, [p.frr for p in points], label="FRR")
        ax.plot(t, [p.misid_rate for p in points], label="misid", linestyle=":")
        ax.plot(t, [p.accuracy for p in points], label="accuracy", linestyle="--")
        ax.set_xlabel("cosine threshold")
        ax.set_ylabel("rate")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(title)
        ax.grid(alpha=0.3)
        ax.legend(loc="center right")
        _save(fig, path)


def plot_timeline(outputs, path, title="Pipeline mode"):
    """Mode per frame with gaze availability and alert events."""
    frames = [o.frame for o in outputs]
    with plt.rc_context(STYLE):
        fig, (ax, ax2) = plt.subplots(2, 1, figsize=(7, 3.2), sharex=True,
                                      gridspec_kw={"height_ratios": [2, 1]})
        ax.step(frames, [_MODE_LEVEL[o.mode] for o in outputs], where="post")
        ax.set_yticks(range(3), [m.value for m in _MODE_LEVEL])
        ax.set_title(title)
        for o in outputs:
            if o.alert == "raised":
                ax.axvline(o.frame, color="tab:red", alpha=0.6)
            elif o.alert == "cleared":
                ax.axvline(o.frame, color="tab:green", alpha=0.6)
        ax2.scatter([o.frame for o in outputs if o.gaze],
                    [o.gaze.region for o in outputs if o.gaze], s=4)
        ax2.set_ylim(0.5, 9.5)
        ax2.set_ylabel("gaze")
        ax2.set_xlabel("frame")
        if frames:
            ax2.set_xlim(frames[0], frames[-1])
        _save(fig, path)
