"""Strategy-dispatched training loop with Adam and periodic validation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import losses
from .allocation import STRATEGIES, Partition, PairingPlan, make_plan
from .evaluation import aar, evaluate_model
from .model import DenoiserNet, build_denoiser, forward
from .numerics import Tape, Tensor, backward, select, zero_grad

logger = logging.getLogger(__name__)

_BATCH_TAG = 0xBA7C
_PAIR_TAG = 0x9A12
_SPLIT_TAG = 0x5917


class DivergenceError(RuntimeError):
    """Training produced non-finite losses for too many consecutive steps."""


class StrategyError(ValueError):
    """The strategy is unknown or lacks a resource it needs."""


@dataclass
class TrainConfig:
    strategy: str = "opd_al"
    steps: int = 2000
    batch_samples: int = 4
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    validation_fraction: float = 0.1
    log_every: int = 10
    val_every: int = 250
    all_pairs: bool = False
    record_time: bool = False
    max_bad_steps: int = 10

    def __post_init__(self):
        self.strategy = normalize_strategy(self.strategy)
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_samples < 1:
            raise ValueError("batch_samples must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.log_every < 1 or self.val_every < 1:
            raise ValueError("log_every and val_every must be >= 1")


def normalize_strategy(name: str) -> str:
    key = name.strip().lower().replace("-", "_")
    if key not in STRATEGIES:
        raise StrategyError(f"unknown strategy {name!r}; choose from {', '.join(s.replace('_', '-') for s in STRATEGIES)}")
    return key


# --- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place. Missing gradients count as zero."""
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient; optimizer step aborted")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)


# --- data split ---------------------------------------------------------------

def split_validation(dataset: Sequence, fraction: float = 0.1, seed: int = 0) -> tuple[list, list]:
    """Whole-sample random split; the validation set has ``max(1, round(fraction*N))`` samples."""
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least 2 samples to split off a validation set")
    n_val = min(n - 1, max(1, round(fraction * n)))
    rng = np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_TAG]))
    order = rng.permutation(n)
    val_idx = set(int(i) for i in order[:n_val])
    train = [s for i, s in enumerate(dataset) if i not in val_idx]
    val = [s for i, s in enumerate(dataset) if i in val_idx]
    return train, val


# --- logging ------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    epoch: int
    strategy: str
    train_loss: float
    mse_term: float | None = None
    msa_term: float | None = None
    seconds: float | None = None


@dataclass
class ValRecord:
    step: int
    epoch: int
    strategy: str
    psnr: float
    ssim: float
    rmse: float
    seconds: float | None = None


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    validations: list[ValRecord] = field(default_factory=list)
    partitions: list[Partition] = field(default_factory=list)

    @property
    def final_validation(self) -> ValRecord | None:
        return self.validations[-1] if self.validations else None

    def rows(self) -> list[dict]:
        """Training and validation records merged in step order (training first)."""
        out = []
        for r in self.steps:
            out.append(("t", r.step, asdict(r)))
        for r in self.validations:
            out.append(("v", r.step, asdict(r)))
        out.sort(key=lambda x: (x[1], x[0] == "v"))
        return [(kind, rec) for kind, _, rec in out]


# --- one optimisation step ----------------------------------------------------

def _frames_tensor(net: DenoiserNet, arrays: list[np.ndarray]) -> Tensor:
    return Tensor(np.stack(arrays)[:, None].astype(net.dtype, copy=False))


def _label(arr: np.ndarray, dtype) -> np.ndarray:
    return np.asarray(arr, dtype=dtype)[None, None]


def train_step(net: DenoiserNet, batch: Sequence, indices: Sequence[int], plan: PairingPlan, step: int,
               rng: np.random.Generator, adam: AdamState, config: TrainConfig,
               aar_cache: dict | None = None) -> tuple[float, float | None, float | None, list[Partition]]:
    """One Adam update on ``batch``; returns (loss, mse term, msa term, realised partitions).

    ``indices`` are the samples' positions in the training set, used to look up
    static partitions and per-step partition streams.
    """
    strategy = plan.strategy
    if strategy != config.strategy:
        raise StrategyError(f"plan is for {strategy} but config asks for {config.strategy}")
    if len({s.m for s in batch}) != 1:
        raise StrategyError("all samples in a batch must share one frame count")
    dtype = net.dtype
    params = net.parameters()
    realised: list[Partition] = []
    mse_val = msa_val = None

    inputs, labels = [], []
    if strategy in ("n2c", "n2n", "opd_rc"):
        for stack, idx in zip(batch, indices):
            if strategy == "n2c":
                if aar_cache is not None and idx in aar_cache:
                    target = aar_cache[idx]
                else:
                    target = aar(stack)
                    if aar_cache is not None:
                        aar_cache[idx] = target
                frames = range(stack.m) if config.all_pairs else [int(rng.integers(stack.m))]
                couples = [(j, target) for j in frames]
            else:
                part = plan.partition(idx, step)
                realised.append(part)
                pairs = part.pairs()
                if not config.all_pairs:
                    pairs = [pairs[int(rng.integers(len(pairs)))]] if strategy == "n2n" else pairs[:1]
                couples = [(j, stack.frames[k]) for j, k in pairs]
            for j, target in couples:
                inputs.append(stack.frames[j])
                labels.append(target)

    zero_grad(params)
    with Tape() as tape:
        if strategy == "opd_al":
            m = batch[0].m
            x = _frames_tensor(net, [f for s in batch for f in s.frames])
            y = forward(net, x)
            parts = []
            for b, stack in enumerate(batch):
                outs = [select(y, b * m + j) for j in range(m)]
                frames = [_label(f, dtype) for f in stack.frames]
                parts.append(losses.opd_loss(outs, frames))
            loss = losses.batch_mean([p.total for p in parts])
            mse_val = float(np.mean([p.mse_term.item() for p in parts]))
            msa_val = float(np.mean([p.msa_term.item() for p in parts]))
        else:
            y = forward(net, _frames_tensor(net, inputs))
            terms = [losses.pairwise_l2(select(y, i), _label(lbl, dtype)) for i, lbl in enumerate(labels)]
            loss = losses.batch_mean(terms)

    value = loss.item()
    if not math.isfinite(value):
        return value, mse_val, msa_val, realised
    backward(loss, tape)
    adam_step(params, [p.grad for p in params], adam, config.learning_rate, config.beta1, config.beta2, config.eps)
    return value, mse_val, msa_val, realised


# --- full run -----------------------------------------------------------------

def _validate(net: DenoiserNet, val_set: Sequence) -> tuple[float, float, float]:
    agg = evaluate_model(net, val_set, "per_frame").aggregate()
    return agg["psnr"], agg["ssim"], agg["rmse"]


def train_run(config: TrainConfig, train_set: Sequence, val_set: Sequence = (),
              net: DenoiserNet | None = None) -> tuple[DenoiserNet, TrainLog]:
    """Train a fresh (or given) denoiser for ``config.steps`` steps.

    Batches are ``batch_samples`` whole samples drawn from a per-epoch
    shuffle of ``train_set``. Validation runs every ``val_every`` steps and
    after the last step.
    """
    if not train_set:
        raise ValueError("empty training set")
    net = net or build_denoiser(config.seed)
    plan = make_plan(config.strategy, train_set, config.seed)
    adam = AdamState.for_params(net.parameters())
    log = TrainLog()
    if config.steps == 0:
        return net, log

    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _BATCH_TAG]))
    pair_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _PAIR_TAG]))
    n = len(train_set)
    order: list[int] = []
    epoch = -1
    bad = 0
    aar_cache: dict = {}
    start = time.perf_counter()

    def elapsed():
        return round(time.perf_counter() - start, 3) if config.record_time else None

    for step in range(1, config.steps + 1):
        idx = []
        while len(idx) < min(config.batch_samples, n):
            if not order:
                order = [int(i) for i in order_rng.permutation(n)]
                epoch += 1
            cand = order.pop(0)
            if cand not in idx:
                idx.append(cand)
        batch = [train_set[i] for i in idx]
        loss, mse_t, msa_t, parts = train_step(net, batch, idx, plan, step, pair_rng, adam, config, aar_cache)
        log.partitions.extend(parts)

        if math.isfinite(loss):
            bad = 0
        else:
            bad += 1
            logger.warning("step %d: non-finite loss, update skipped", step)
            if bad >= config.max_bad_steps:
                raise DivergenceError(f"{bad} consecutive non-finite losses (last at step {step})")

        if step % config.log_every == 0:
            log.steps.append(StepRecord(step, epoch, config.strategy, loss, mse_t, msa_t, elapsed()))
        if val_set and (step % config.val_every == 0 or step == config.steps):
            p, s, r = _validate(net, val_set)
            log.validations.append(ValRecord(step, epoch, config.strategy, p, s, r, elapsed()))
            logger.info("%s step %d: val psnr %.3f ssim %.4f", config.strategy, step, p, s)
    return net, log
