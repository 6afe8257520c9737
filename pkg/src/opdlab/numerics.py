"""Small dense-tensor core with a recording tape for reverse-mode gradients.

Only the handful of operations the denoiser and its losses need are provided:
2-D convolution, ReLU, nearest-neighbour upsampling, channel concatenation,
batch selection, elementwise add/sub/scale, a full sum and the mean squared
difference.

Operations record themselves on the innermost active :class:`Tape` when any
input requires a gradient::

    with Tape() as tape:
        loss = mean_squared_diff(conv2d(x, w, b), target)
    backward(loss, tape)

Images use the ``B x C x H x W`` layout. Arrays keep the dtype of their
inputs, so float32 is used for training and float64 for verification.
"""
from __future__ import annotations

import logging
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

_TAPES: list["Tape"] = []
_FORCE_IM2COL = False

# Reused workspace for the large per-tap conv buffers. Fresh 80 MB arrays on
# every call spend more time page-faulting than multiplying. Not thread-safe.
_SCRATCH: dict[np.dtype, np.ndarray] = {}


def _scratch(shape: tuple[int, ...], dtype) -> np.ndarray:
    dtype = np.dtype(dtype)
    n = int(np.prod(shape))
    buf = _SCRATCH.get(dtype)
    if buf is None or buf.size < n:
        buf = _SCRATCH[dtype] = np.empty(n, dtype=dtype)
    return buf[:n].reshape(shape)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    """Dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Usable as a context manager; nested tapes are allowed and operations are
    recorded on the innermost one.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].nodes.append(_Node(out, tuple(inputs), backward_fn))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every grad-requiring tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; call :func:`zero_grad` between
    optimisation steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.out) for node in tape.nodes}
    if id(loss) not in produced and not loss.requires_grad:
        raise ValueError("loss was not produced through this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        gout = grads.get(id(node.out))
        if gout is None:
            continue
        for inp, g in zip(node.inputs, node.backward(gout)):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                seen[key] = inp

    for key, tensor in seen.items():
        if key in produced or tensor is loss:
            tensor.grad = grads[key]
        elif tensor.grad is None:
            tensor.grad = grads[key].copy()
        else:
            tensor.grad += grads[key]


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B,C,H,W) with ``weight`` (O,C,k,k) plus ``bias`` (O,)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, k, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input has C={C}, weight expects C={Cw} (weight {weight.shape})")
    if k != kw or k % 2 == 0:
        raise ShapeError(f"conv2d needs a square odd kernel, got {k}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding nonnegative")
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d output extent {Ho}x{Wo} is not positive for input {H}x{W}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"bias shape {bias.shape} does not match {O} output channels")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # im2col wins when the input has fewer channels than the output
    if stride == 1 and C >= O and not _FORCE_IM2COL:
        return _conv2d_shift(x, weight, bias, xp, padding, Ho, Wo)

    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (C, k, k, B, Ho, Wo) -> one GEMM over all batch positions
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(C * k * k, B * Ho * Wo)
    wmat = weight.data.reshape(O, C * k * k)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    result = Tensor(np.ascontiguousarray(out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)))

    def _backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(C, k, k, B, Ho, Wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(result, inputs, _backward)


def _conv2d_shift(x, weight, bias, xp, padding, Ho, Wo):
    # Stride-1 path: one batched GEMM against all k*k kernel taps on the
    # padded grid, then sum the k*k shifted output windows. Avoids im2col.
    B, C, H, W = x.shape
    O, _, k, _ = weight.shape
    Hp, Wp = xp.shape[2:]
    xflat = xp.reshape(B, C, Hp * Wp)
    wstack = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1).reshape(k * k * O, C))
    dtype = np.result_type(wstack, xflat)
    taps = np.matmul(wstack, xflat, out=_scratch((B, k * k * O, Hp * Wp), dtype)).reshape(B, k, k, O, Hp, Wp)
    out = taps[:, 0, 0, :, :Ho, :Wo].copy()
    for i in range(k):
        for j in range(k):
            if i or j:
                out += taps[:, i, j, :, i:i + Ho, j:j + Wo]
    del taps
    if bias is not None:
        out += bias.data[None, :, None, None]
    result = Tensor(out)

    def _backward(g):
        # each tap holds g at its offset; only the border ring needs zeroing
        spread = _scratch((B, k, k, O, Hp, Wp), g.dtype)
        for i in range(k):
            for j in range(k):
                tap = spread[:, i, j]
                tap[:, :, i:i + Ho, j:j + Wo] = g
                tap[:, :, :i] = 0
                tap[:, :, i + Ho:] = 0
                tap[:, :, i:i + Ho, :j] = 0
                tap[:, :, i:i + Ho, j + Wo:] = 0
        spread = spread.reshape(B, k * k * O, Hp * Wp)
        gw = None
        if weight.requires_grad:
            gw = np.matmul(spread, xflat.transpose(0, 2, 1)).sum(axis=0)
            gw = np.ascontiguousarray(gw.reshape(k, k, O, C).transpose(2, 3, 0, 1))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.matmul(wstack.T, spread).reshape(B, C, Hp, Wp)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(result, inputs, _backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.maximum(x.data, 0, dtype=x.dtype))
    return _record(out, (x,), lambda g: (g * mask,))


def upsample_nearest_2x(x: Tensor) -> Tensor:
    """Double H and W by pixel replication."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample expects B x C x H x W, got {x.shape}")
    B, C, H, W = x.shape
    up = np.broadcast_to(x.data[:, :, :, None, :, None], (B, C, H, 2, W, 2)).reshape(B, C, 2 * H, 2 * W)
    out = Tensor(up)

    def _backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), _backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects 4-D tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels needs matching B, H, W; got {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    return _record(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def select(x: Tensor, index: int) -> Tensor:
    """Item ``index`` along the leading (batch) axis, keeping that axis."""
    out = Tensor(x.data[index:index + 1])

    def _backward(g):
        gx = np.zeros_like(x.data, dtype=g.dtype)
        gx[index:index + 1] = g
        return (gx,)

    return _record(out, (x,), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return _record(Tensor(a.data + b.data), (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub needs identical shapes, got {a.shape} and {b.shape}")
    return _record(Tensor(a.data - b.data), (a, b), lambda g: (g, -g))


def scale(x: Tensor, factor: float) -> Tensor:
    out = Tensor(x.data * x.dtype.type(factor))
    return _record(out, (x,), lambda g: (g * g.dtype.type(factor),))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors."""
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeError("add_n needs identical shapes")
    total = tensors[0].data.copy()
    for t in tensors[1:]:
        total += t.data
    return _record(Tensor(total), tuple(tensors), lambda g: (g,) * len(tensors))


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_squared_diff(a: Tensor, b: Tensor) -> Tensor:
    """``mean((a - b)**2)`` as a scalar tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mean_squared_diff needs identical shapes, got {a.shape} and {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = Tensor(np.asarray(np.vdot(diff.ravel(), diff.ravel()) / n, dtype=diff.dtype))

    def _backward(g):
        ga = (2.0 / n) * g * diff
        return ga.astype(diff.dtype, copy=False), -ga.astype(diff.dtype, copy=False)

    return _record(out, (a, b), _backward)


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
               coords: int | None = None, rng: np.random.Generator | None = None,
               kink_tol: float = 0.0) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn`` rebuilds the loss from the current parameter values. When
    ``coords`` is given, that many coordinates per parameter are sampled
    instead of checking every one. ``kink_tol`` skips coordinates whose
    perturbation flips the sign of a ReLU pre-activation in a way that makes
    the two one-sided slopes disagree by more than the tolerance; with the
    default of 0 every sampled coordinate is checked.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    zero_grad(params)
    for p in params:
        p.requires_grad = True
    with Tape() as tape:
        loss = fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    backward(loss, tape)
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = rng.choice(flat.size, size=coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn().item()
            flat[i] = orig - step
            f_minus = fn().item()
            flat[i] = orig
            f0 = loss.item()
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("loss is not finite under perturbation")
            if kink_tol > 0:
                right, left = (f_plus - f0) / step, (f0 - f_minus) / step
                if abs(right - left) > kink_tol * max(abs(right), abs(left), 1.0):
                    continue
            numeric = (f_plus - f_minus) / (2 * step)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
