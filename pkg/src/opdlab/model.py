"""Compact two-scale encoder-decoder denoiser.

Layer plan (every conv is 3x3, padding 1)::

    enc1a  conv 1 -> 16, relu
    enc1b  conv 16 -> 16, relu          (skip source)
    down   conv 16 -> 32, stride 2, relu
    enc2   conv 32 -> 32, relu
    up     upsample x2, conv 32 -> 16, relu
    fuse   concat(enc1b, up) -> conv 32 -> 16, relu
    head   conv 16 -> 1, linear

The network maps one noisy frame to one estimate; there is no global
residual connection and no output clamp.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor, ShapeError, concat_channels, conv2d, relu, upsample_nearest_2x

# (name, in_channels, out_channels, stride)
LAYER_PLAN: tuple[tuple[str, int, int, int], ...] = (
    ("enc1a", 1, 16, 1),
    ("enc1b", 16, 16, 1),
    ("down", 16, 32, 2),
    ("enc2", 32, 32, 1),
    ("up", 32, 16, 1),
    ("fuse", 32, 16, 1),
    ("head", 16, 1, 1),
)
KERNEL = 3

# sum over the plan of O*C*9 + O
PARAMETER_COUNT = 25_761


def he_init(shape: tuple[int, int, int, int], rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Zero-mean normal weights with std ``sqrt(2 / fan_in)``, fan_in = C*k*k."""
    _, c, kh, kw = shape
    std = np.sqrt(2.0 / (c * kh * kw))
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


@dataclass
class DenoiserNet:
    weights: dict[str, Tensor]
    biases: dict[str, Tensor]
    seed: int | None = None
    plan: tuple = field(default=LAYER_PLAN)

    def parameters(self) -> list[Tensor]:
        """Weights and biases in declared layer order (w0, b0, w1, b1, ...)."""
        params = []
        for name, *_ in self.plan:
            params.append(self.weights[name])
            params.append(self.biases[name])
        return params

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, *_ in self.plan:
            out.append((f"{name}.weight", self.weights[name]))
            out.append((f"{name}.bias", self.biases[name]))
        return out

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    @property
    def dtype(self):
        return self.weights["head"].dtype

    def astype(self, dtype) -> "DenoiserNet":
        w = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.weights.items()}
        b = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.biases.items()}
        return DenoiserNet(w, b, seed=self.seed, plan=self.plan)

    def copy(self) -> "DenoiserNet":
        return self.astype(self.dtype)

    def _conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        return conv2d(x, self.weights[name], self.biases[name], stride=stride, padding=1)

    def __call__(self, batch: Tensor) -> Tensor:
        return forward(self, batch)


def build_denoiser(seed: int, dtype=np.float32) -> DenoiserNet:
    rng = np.random.default_rng(seed)
    weights, biases = {}, {}
    for name, cin, cout, _ in LAYER_PLAN:
        weights[name] = he_init((cout, cin, KERNEL, KERNEL), rng, dtype)
        biases[name] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return DenoiserNet(weights, biases, seed=seed)


def forward(net: DenoiserNet, batch: Tensor) -> Tensor:
    """Apply the denoiser to a ``B x 1 x H x W`` batch."""
    if batch.data.ndim != 4 or batch.shape[1] != 1:
        raise ShapeError(f"denoiser expects B x 1 x H x W input, got {batch.shape}")
    h, w = batch.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"spatial extents must be even, got {h}x{w}; pad the image by one row/column")
    if batch.dtype != net.dtype:
        batch = Tensor(batch.data.astype(net.dtype))

    e1 = relu(net._conv("enc1a", batch))
    e1 = relu(net._conv("enc1b", e1))
    d = relu(net._conv("down", e1, stride=2))
    d = relu(net._conv("enc2", d))
    u = relu(net._conv("up", upsample_nearest_2x(d)))
    f = relu(net._conv("fuse", concat_channels(e1, u)))
    return net._conv("head", f)
