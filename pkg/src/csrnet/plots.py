"""Matplotlib figures written next to the CLI's CSV outputs."""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def figure_path(csv_path, suffix=""):
    """``report.csv`` -> ``report<suffix>.png`` in the same directory."""
    stem, _ = os.path.splitext(csv_path)
    return f"{stem}{suffix}.png"


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training_curve(log, path, title=None):
    """L1 loss (log scale) and train PSNR against iteration."""
    if not log:
        raise ValueError("empty training log")
    it = [r["iter"] for r in log]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.semilogy(it, [r["l1"] for r in log], color="tab:blue")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("running L1")
    ax2.plot(it, [r["psnr"] for r in log], color="tab:red")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("train PSNR (dB)")
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_metrics(report, path, title=None):
    """Per-image PSNR bars with the mean as a dashed line."""
    names = [r.file for r in report.rows]
    values = [r.psnr for r in report.rows]
    fig, ax = plt.subplots(figsize=(max(4, 0.35 * len(names) + 2), 3.5))
    ax.bar(range(len(names)), values, color="tab:green")
    ax.axhline(report.mean_psnr, color="k", ls="--", lw=1, label=f"mean {report.mean_psnr:.2f} dB")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=90, fontsize=7)
    ax.set_ylabel("PSNR (dB)")
    ax.legend(loc="lower right")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def _as_map(a):
    a = np.asarray(a)
    if a.ndim == 1:
        # GFM: one value per channel, drawn as a 1 x C strip
        return a[None, :]
    return a


def plot_modulation(gamma, beta, path, channel=0, title=None):
    """Heatmaps of gamma and beta; SFM maps show ``channel``, GFM shows all channels."""
    gamma, beta = np.asarray(gamma), np.asarray(beta)
    if gamma.ndim == 3:
        gamma, beta = gamma[channel], beta[channel]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    for ax, data, label in ((axes[0], gamma, "gamma"), (axes[1], beta, "beta")):
        im = ax.imshow(_as_map(data), cmap="viridis", aspect="auto", interpolation="nearest")
        ax.set_title(label)
        fig.colorbar(im, ax=ax, fraction=0.046)
        if data.ndim == 1:
            ax.set_yticks([])
            ax.set_xlabel("channel")
    if title:
        fig.suptitle(title)
    return _save(fig, path)
