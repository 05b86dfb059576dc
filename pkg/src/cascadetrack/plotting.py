"""Report figures written next to the CSV/text outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIGSIZE = (6.4, 3.6)


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_error_series(landmarks, path) -> Path:
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for lm in landmarks:
        frames = lm.frames or range(1, len(lm.errors) + 1)
        ax.plot(list(frames), lm.errors, lw=0.8, label=f"{lm.sequence}/{lm.landmark_id}")
    ax.set_xlabel("frame")
    ax.set_ylabel("error (mm)")
    if len(landmarks) <= 8:
        ax.legend(fontsize=7, frameon=False)
    return _save(fig, path)


def plot_landmark_bars(landmarks, path) -> Path:
    means = [np.mean(lm.errors) for lm in landmarks]
    stds = [np.std(lm.errors) for lm in landmarks]
    labels = [f"{lm.sequence}/{lm.landmark_id}" for lm in landmarks]
    fig, ax = plt.subplots(figsize=(max(FIGSIZE[0], 0.4 * len(labels)), FIGSIZE[1]))
    x = np.arange(len(labels))
    ax.bar(x, means, yerr=stds, color="0.6", ecolor="black", capsize=2)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("mean error (mm)")
    return _save(fig, path)


def plot_error_histogram(landmarks, path, bins: int = 30) -> Path:
    pooled = np.concatenate([np.asarray(lm.errors, dtype=float) for lm in landmarks])
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.hist(pooled, bins=bins, color="0.5")
    p95 = np.sort(pooled)[int(np.ceil(0.95 * pooled.size)) - 1]
    ax.axvline(p95, color="black", ls="--", lw=0.8)
    ax.text(p95, ax.get_ylim()[1] * 0.9, " p95", fontsize=8)
    ax.set_xlabel("error (mm)")
    ax.set_ylabel("frames")
    return _save(fig, path)


def plot_loss_curves(history, path) -> Path:
    fig, ax = plt.subplots(figsize=FIGSIZE)
    epochs = [h["epoch"] for h in history]
    for key in ("L", "Lcls", "Lmask", "Lbox", "Latt"):
        vals = [h.get(key, 0.0) for h in history]
        if any(v > 0 for v in vals):
            ax.plot(epochs, vals, lw=1.0, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, path)


def render_report(report, stem, history=None) -> list:
    """Error figures for a report (plus loss curves when a history is given)."""
    stem = str(stem)
    out = [
        plot_error_series(report.landmarks, stem + "_errors.png"),
        plot_landmark_bars(report.landmarks, stem + "_landmarks.png"),
        plot_error_histogram(report.landmarks, stem + "_hist.png"),
    ]
    if history:
        out.append(plot_loss_curves(history, stem + "_loss.png"))
    return out
