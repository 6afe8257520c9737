"""Figure rendering for comparison reports (written to files, never shown)."""
from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = {"n2c": "#7f7f7f", "n2n": "#1f77b4", "opd_rc": "#2ca02c", "opd_al": "#d62728", "input": "#bcbd22"}


def _smooth(y: np.ndarray, width: int) -> np.ndarray:
    if width <= 1 or len(y) < width:
        return y
    kernel = np.ones(width) / width
    return np.convolve(y, kernel, mode="valid")


def plot_curves(report: dict, path: str | os.PathLike, smooth: int = 10) -> Path:
    """Training loss per strategy (mean over seeds) and the OPD-AL alienation term."""
    fig, (ax_loss, ax_msa) = plt.subplots(1, 2, figsize=(10, 3.8))
    for s in report["strategies"]:
        curves = [c["curve"] for c in report["cells"] if c["strategy"] == s and c["status"] == "ok"]
        if not curves:
            continue
        n = min(len(c) for c in curves)
        steps = np.array([c[i][0] for i in range(n) for c in curves[:1]])
        loss = np.mean([[c[i][1] for i in range(n)] for c in curves], axis=0)
        y = _smooth(loss, smooth)
        ax_loss.plot(steps[len(steps) - len(y):], y, label=s, color=COLORS.get(s))
        if s == "opd_al":
            msa = np.mean([[c[i][3] for i in range(n)] for c in curves], axis=0)
            mse = np.mean([[c[i][2] for i in range(n)] for c in curves], axis=0)
            ax_msa.plot(steps[len(steps) - len(_smooth(msa, smooth)):], _smooth(msa, smooth), label="MSA", color="#d62728")
            ax_msa.plot(steps[len(steps) - len(_smooth(mse, smooth)):], _smooth(mse, smooth), label="MSE (noisy)", color="#9467bd")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("training loss")
    ax_loss.set_yscale("log")
    ax_loss.legend(frameon=False)
    ax_msa.set_xlabel("step")
    ax_msa.set_ylabel("opd_al loss terms")
    if ax_msa.lines:
        ax_msa.legend(frameon=False)
    else:
        ax_msa.text(0.5, 0.5, "no opd_al runs", ha="center", va="center", transform=ax_msa.transAxes)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_psnr_bars(rows: list[dict], path: str | os.PathLike) -> Path:
    """Mean validation PSNR per method with the spread over seeds."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = [r["method"] for r in rows]
    means = [r["psnr_mean"] for r in rows]
    stds = [r["psnr_std"] for r in rows]
    ax.bar(names, means, yerr=stds, capsize=4, color=[COLORS.get(n, "#333333") for n in names])
    lo = min(means) - 1.0
    ax.set_ylim(lo, max(means) + 1.0)
    ax.set_ylabel("PSNR (dB)")
    for i, m in enumerate(means):
        ax.text(i, m + 0.1, f"{m:.2f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_stack(frames: np.ndarray, estimate: np.ndarray, path: str | os.PathLike, clean: np.ndarray | None = None) -> Path:
    """Side by side: first noisy frame, estimate, and clean image when known."""
    panels = [("noisy frame", frames[0]), ("estimate", estimate)]
    if clean is not None:
        panels.append(("clean", clean))
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3))
    for ax, (title, img) in zip(axes, panels):
        ax.imshow(np.clip(img, 0, 1), cmap="gray", vmin=0, vmax=1)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
