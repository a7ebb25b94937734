"""Report figures. Everything renders off-screen to files."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["figure.dpi"] = 110
plt.rcParams["savefig.bbox"] = "tight"
plt.rcParams["font.size"] = 9
plt.rcParams["axes.spines.top"] = False
plt.rcParams["axes.spines.right"] = False


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_traces(traces: dict[str, Sequence[float]], path) -> Path:
    fig, axes = plt.subplots(1, len(traces), figsize=(4 * len(traces), 2.8), squeeze=False)
    for ax, (name, trace) in zip(axes[0], traces.items()):
        ax.plot(np.arange(1, len(trace) + 1), trace, lw=1.5)
        ax.set_title(name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
    fig.tight_layout()
    return _save(fig, path)


def plot_detection(X: np.ndarray, detected: Sequence[int], truth: Sequence[int],
                   fg: np.ndarray | None, path, title: str = "") -> Path:
    """Feature heat map with true (dashed) and detected (solid) change-points."""
    rows = 2 if fg is not None else 1
    fig, axes = plt.subplots(rows, 1, figsize=(8, 2.2 * rows), sharex=True, squeeze=False)
    ax = axes[0, 0]
    ax.imshow(X.T, aspect="auto", cmap="RdBu_r", interpolation="nearest")
    ax.set_ylabel("feature")
    for t in truth:
        ax.axvline(t - 0.5, color="k", ls="--", lw=1)
    for t in detected:
        ax.axvline(t - 0.5, color="tab:orange", lw=1.2)
    if title:
        ax.set_title(title)
    if fg is not None:
        ax = axes[1, 0]
        ax.plot(fg, color="tab:green", lw=1.2)
        ax.set_ylim(0, 1)
        ax.set_ylabel("fg attention")
    axes[-1, 0].set_xlabel("snippet")
    fig.tight_layout()
    return _save(fig, path)


def plot_map_curve(report, path, baseline=None) -> Path:
    th = list(report.thresholds)
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(th, [report.map_by_threshold[t] for t in th], "o-", label="with pruning")
    if baseline is not None:
        ax.plot(th, [baseline.map_by_threshold[t] for t in th], "s--", label="no pruning")
        ax.legend(frameon=False)
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("mAP")
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    return _save(fig, path)
