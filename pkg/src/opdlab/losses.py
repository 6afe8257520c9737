"""Training objectives.

Every squared norm is the per-element mean (:func:`mean_squared_diff`), so
loss magnitudes do not depend on image size. ``outputs`` are the per-frame
network estimates of one sample and ``frames`` its noisy observations.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .numerics import Tensor, ShapeError, add_n, mean_squared_diff, scale, sub


@dataclass
class LossBreakdown:
    total: Tensor
    mse_term: Tensor
    msa_term: Tensor

    def values(self) -> tuple[float, float, float]:
        return self.total.item(), self.mse_term.item(), self.msa_term.item()


def _const(x) -> Tensor:
    if isinstance(x, Tensor):
        return x if not x.requires_grad else Tensor(x.data)
    return Tensor(np.asarray(x))


def _check_outputs(outputs: Sequence[Tensor]) -> None:
    if len(outputs) < 2:
        raise ValueError(f"need at least 2 outputs, got {len(outputs)}")
    shape = outputs[0].shape
    if any(y.shape != shape for y in outputs):
        raise ShapeError("all outputs must share one shape")


def pairwise_l2(pred: Tensor, label) -> Tensor:
    """L2 loss of one prediction against one label (noisy frame or frame average)."""
    return mean_squared_diff(pred, _const(label))


def batch_mean(losses: Sequence[Tensor]) -> Tensor:
    return scale(add_n(list(losses)), 1.0 / len(losses))


def opd_clean_loss(outputs: Sequence[Tensor], clean_est) -> Tensor:
    """Distance between the mean of the per-frame outputs and a clean estimate."""
    _check_outputs(outputs)
    m = len(outputs)
    mean = scale(add_n(list(outputs)), 1.0 / m)
    return mean_squared_diff(mean, _const(clean_est))


def msa(outputs: Sequence[Tensor]) -> Tensor:
    """Mean square alienation: ``(1/m^2) * sum_{j<k} ||y_j - y_k||^2``."""
    _check_outputs(outputs)
    m = len(outputs)
    terms = [mean_squared_diff(a, b) for a, b in combinations(outputs, 2)]
    return scale(add_n(terms), 1.0 / m ** 2)


def opd_clean_decomposed(outputs: Sequence[Tensor], clean_est) -> LossBreakdown:
    """:func:`opd_clean_loss` split into the per-frame error minus the alienation."""
    _check_outputs(outputs)
    m = len(outputs)
    target = _const(clean_est)
    mse_term = scale(add_n([mean_squared_diff(y, target) for y in outputs]), 1.0 / m)
    msa_term = msa(outputs)
    return LossBreakdown(sub(mse_term, msa_term), mse_term, msa_term)


def mse_noisy(outputs: Sequence[Tensor], frames: Sequence) -> Tensor:
    """Average error of each output against every *other* noisy frame."""
    _check_outputs(outputs)
    if len(frames) != len(outputs):
        raise ValueError(f"got {len(outputs)} outputs but {len(frames)} frames")
    m = len(outputs)
    targets = [_const(f) for f in frames]
    if any(t.shape != outputs[0].shape for t in targets):
        raise ShapeError("frames must match the output shape")
    terms = [mean_squared_diff(outputs[j], targets[k]) for j in range(m) for k in range(m) if j != k]
    return scale(add_n(terms), 1.0 / (m * (m - 1)))


def opd_loss(outputs: Sequence[Tensor], frames: Sequence) -> LossBreakdown:
    """OPD-AL objective: noisy-label MSE minus mean square alienation."""
    mse_term = mse_noisy(outputs, frames)
    msa_term = msa(outputs)
    return LossBreakdown(sub(mse_term, msa_term), mse_term, msa_term)
