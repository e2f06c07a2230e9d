"""Report figures and delimited output for training, evaluation and timing runs.

Figures go to files only; the non-interactive Agg backend is selected before
pyplot is imported so the module works on headless machines.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(history: list[dict], path) -> Path:
    """Loss (with a running mean), learning rate, and validation EPE when present."""
    it = np.array([h["iteration"] for h in history])
    loss = np.array([h["loss"] for h in history])
    lr = np.array([h["lr"] for h in history])
    val = [(h["iteration"], h["val_epe"]) for h in history if h.get("val_epe") is not None]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3 if val else 2, figsize=(10 if val else 7, 3))
        ax = axes[0]
        ax.plot(it, loss, lw=0.6, alpha=0.5, label="iteration")
        k = max(1, min(50, len(loss) // 10))
        if len(loss) >= k > 1:
            smooth = np.convolve(loss, np.ones(k) / k, mode="valid")
            ax.plot(it[k - 1 :], smooth, lw=1.4, label=f"mean of {k}")
        ax.set_xlabel("iteration")
        ax.set_ylabel("training loss")
        ax.legend(frameon=False)
        axes[1].semilogy(it, lr, color="C2")
        axes[1].set_xlabel("iteration")
        axes[1].set_ylabel("learning rate")
        if val:
            vi, ve = zip(*val)
            axes[2].plot(vi, ve, "o-", color="C3", ms=3)
            axes[2].set_xlabel("iteration")
            axes[2].set_ylabel("validation EPE (px)")
        return _save(fig, path)


def plot_evaluation(clip_epe: Sequence[float], scale_epe: dict, path, title: str = "") -> Path:
    """Histogram of per-clip EPE next to mean EPE per decoder stride."""
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
        a.hist(clip_epe, bins=min(20, max(5, len(clip_epe))), color="C0", alpha=0.8)
        a.axvline(np.median(clip_epe), color="k", ls="--", lw=1, label="median")
        a.set_xlabel("clip EPE (px)")
        a.set_ylabel("clips")
        a.legend(frameon=False)
        strides = sorted(scale_epe, reverse=True)
        b.bar(range(len(strides)), [scale_epe[s] for s in strides], color="C1")
        b.set_xticks(range(len(strides)), [str(s) for s in strides])
        b.set_xlabel("stride")
        b.set_ylabel("EPE at that scale (px)")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_benchmark(times: dict[str, Sequence[float]], path) -> Path:
    """Box plot of per-run forward times for each variant, in milliseconds."""
    names = list(times)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.boxplot([np.asarray(times[n]) * 1e3 for n in names], showfliers=False)
        ax.set_xticks(range(1, len(names) + 1), names)
        ax.set_ylabel("forward time per clip (ms)")
        return _save(fig, path)


def plot_flow_sheet(images: Sequence[np.ndarray], labels: Sequence[str], path, cols: int = 5) -> Path:
    """Grid of colour-coded flow images (each 3 x H x W in [0, 1])."""
    n = len(images)
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(rows, cols, figsize=(2 * cols, 2 * rows), squeeze=False)
        for ax in axes.ravel():
            ax.axis("off")
        for ax, img, lab in zip(axes.ravel(), images, labels):
            ax.imshow(np.clip(np.asarray(img).transpose(1, 2, 0), 0, 1))
            ax.set_title(lab, fontsize=7)
        return _save(fig, path)
