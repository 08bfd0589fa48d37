"""PNG outputs: confusion matrices, scan timelines and N-way montages."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .cwt import save_png

# metadata stripped so repeated runs produce identical files
_PNG_META = {"Software": None}


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_confusion(cm, path):
    plt = _pyplot()
    n = len(cm.class_names)
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * n, 0.8 + 0.7 * n), dpi=100)
    ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(n), cm.class_names, rotation=45, ha="right")
    ax.set_yticks(range(n), cm.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    top = cm.counts.max() if cm.counts.size else 0
    for i in range(n):
        for j in range(n):
            ax.text(j, i, str(cm.counts[i, j]), ha="center", va="center",
                    color="white" if cm.counts[i, j] > top / 2 else "black")
    ax.set_title(f"accuracy {cm.accuracy:.4f}")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)


def plot_timeline(verdicts, threshold, path, title=None):
    plt = _pyplot()
    t = [v.window_center_seconds for v in verdicts]
    s = [v.score for v in verdicts]
    fig, ax = plt.subplots(figsize=(8, 2.5), dpi=100)
    ax.plot(t, s, "o-", color="0.3", ms=4)
    flagged = [(v.window_center_seconds, v.score) for v in verdicts if v.is_anomaly]
    if flagged:
        ax.plot(*zip(*flagged), "o", color="crimson", ms=8, label="anomaly")
        ax.legend(loc="lower right")
    ax.axhline(threshold, color="crimson", lw=0.8, ls="--")
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("window centre [s]")
    ax.set_ylabel("similarity")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)


def nway_montage(images, records, path, max_trials=4, pad=2):
    """Grid of anchor/candidate pairs: one row per trial, picked pair boxed.

    The box is green when the pick was correct and red otherwise.
    """
    rows = []
    for rec in records[:max_trials]:
        anchor = images[rec["anchor"]]
        h, w = anchor.shape[:2]
        tiles = []
        for k, c in enumerate(rec["candidates"]):
            pair = np.concatenate([anchor, images[c]], axis=1)
            colour = (255, 255, 255)
            if k == rec["pick"]:
                colour = (0, 160, 0) if rec["correct"] else (200, 0, 0)
            tile = np.empty((h + 2 * pad, 2 * w + 2 * pad, 3), np.uint8)
            tile[:] = colour
            tile[pad:pad + h, pad:pad + 2 * w] = pair
            tiles.append(tile)
        rows.append(np.concatenate(tiles, axis=1))
    if not rows:
        return
    width = max(r.shape[1] for r in rows)
    rows = [np.pad(r, ((0, 0), (0, width - r.shape[1]), (0, 0)), constant_values=255) for r in rows]
    save_png(np.concatenate(rows, axis=0), path)
