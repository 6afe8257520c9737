"""Frame averaging baseline and full-reference image quality metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import correlate2d

from .numerics import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def aar(frames) -> np.ndarray:
    """Pixelwise mean of aligned frames (a FrameStack or an ``(m, H, W)`` array)."""
    arr = np.asarray(getattr(frames, "frames", frames))
    if arr.ndim < 1 or arr.shape[0] == 0:
        raise ValueError("cannot average an empty stack")
    return arr.mean(axis=0, dtype=np.float64)


def mse(a, b) -> float:
    a, b = _arr(a), _arr(b)
    _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def rmse(a, b) -> float:
    return math.sqrt(mse(a, b))


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs give ``math.inf``."""
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10 * math.log10(peak ** 2 / err)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5) of 2-D images."""
    a, b = _arr(a), _arr(b)
    _same_shape(a, b)
    a, b = np.squeeze(a), np.squeeze(b)
    if a.ndim != 2:
        raise ValueError("ssim expects a single 2-D image")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    win = gaussian_window()
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2

    def filt(x):
        return correlate2d(x, win, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    rmse: list[float] = field(default_factory=list)
    sample_ids: list[str] = field(default_factory=list)
    proxy_reference: bool = False

    def add(self, sample_id: str, estimate, reference) -> None:
        est = np.clip(_arr(estimate), 0.0, 1.0)
        ref = _arr(reference)
        self.sample_ids.append(sample_id)
        self.psnr.append(psnr(est, ref))
        self.ssim.append(ssim(est, ref))
        self.rmse.append(rmse(est, ref))

    @property
    def count(self) -> int:
        return len(self.psnr)

    @property
    def infinite_psnr_count(self) -> int:
        return sum(math.isinf(v) for v in self.psnr)

    def aggregate(self) -> dict:
        finite = [v for v in self.psnr if not math.isinf(v)]
        if finite:
            mean_psnr = float(np.mean(finite))
        else:
            mean_psnr = math.inf if self.psnr else math.nan
        return {
            "psnr": mean_psnr,
            "ssim": float(np.mean(self.ssim)) if self.ssim else math.nan,
            "rmse": float(np.mean(self.rmse)) if self.rmse else math.nan,
            "count": self.count,
            "psnr_infinite": self.infinite_psnr_count,
        }


def reference_for(stack) -> tuple[np.ndarray, bool]:
    """Clean image when the stack has one, else its frame average (flagged as proxy)."""
    if stack.clean is not None:
        return np.asarray(stack.clean, dtype=np.float64), False
    return aar(stack), True


def denoise_stack(net, stack, batch: int = 16) -> np.ndarray:
    """Per-frame network outputs for every frame of ``stack``, shape ``(m, H, W)``."""
    from .model import forward

    frames = np.asarray(stack.frames, dtype=net.dtype)[:, None]
    outs = [forward(net, Tensor(frames[i:i + batch])).data for i in range(0, len(frames), batch)]
    return np.concatenate(outs)[:, 0]


def evaluate_model(net, stacks: Sequence, inference_mode: str = "per_frame") -> MetricsReport:
    """Score ``net`` on ``stacks``.

    ``per_frame`` scores each frame's estimate separately; ``fused`` scores the
    mean of the m per-frame estimates once per sample.
    """
    if inference_mode not in ("per_frame", "fused"):
        raise ValueError(f"unknown inference mode {inference_mode!r}")
    report = MetricsReport()
    for stack in stacks:
        ref, proxy = reference_for(stack)
        report.proxy_reference |= proxy
        outputs = denoise_stack(net, stack)
        if inference_mode == "fused":
            report.add(stack.sample_id, outputs.mean(axis=0), ref)
        else:
            for j, out in enumerate(outputs):
                report.add(f"{stack.sample_id}/{j}", out, ref)
    return report


def evaluate_aar(stacks: Sequence) -> MetricsReport:
    report = MetricsReport()
    for stack in stacks:
        ref, proxy = reference_for(stack)
        report.proxy_reference |= proxy
        report.add(stack.sample_id, aar(stack), ref)
    return report


def evaluate_input(stacks: Sequence) -> MetricsReport:
    """Metrics of the raw noisy frames themselves, one entry per frame."""
    report = MetricsReport()
    for stack in stacks:
        ref, proxy = reference_for(stack)
        report.proxy_reference |= proxy
        for j, frame in enumerate(stack.frames):
            report.add(f"{stack.sample_id}/{j}", frame, ref)
    return report


def noisy_input_psnr(stacks: Sequence) -> float:
    """Mean unclipped PSNR of single noisy frames against their references."""
    vals = []
    for stack in stacks:
        ref, _ = reference_for(stack)
        vals.extend(psnr(frame, ref) for frame in stack.frames)
    return float(np.mean(vals))
