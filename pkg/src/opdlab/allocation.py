"""Supervision pairing: which frame is the input and which is the label.

Frame indices are 0-based. A :class:`Partition` couples ``J[t]`` (input)
with ``K[t]`` (label).

* ``n2c``: every frame is paired with the sample's frame average.
* ``n2n``: one partition per sample, drawn once and kept for all of training.
* ``opd_rc``: a fresh partition per (sample, step).
* ``opd_al``: no pairing; all frames enter one joint loss.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

STRATEGIES = ("n2c", "n2n", "opd_rc", "opd_al")
TARGET_SOURCE = {"n2c": "aar", "n2n": "noisy_frame", "opd_rc": "noisy_frame", "opd_al": "all_frames"}

_N2N_TAG = 0x2B2B
_RC_TAG = 0x52C0


@dataclass(frozen=True)
class Partition:
    J: tuple[int, ...]
    K: tuple[int, ...]
    discarded: int | None = None

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.J, self.K))

    def validate(self, m: int) -> None:
        h = m // 2
        if len(self.J) != h or len(self.K) != h:
            raise AssertionError(f"halves must have {h} elements, got {len(self.J)} and {len(self.K)}")
        used = set(self.J) | set(self.K)
        if len(used) != 2 * h:
            raise AssertionError("J and K overlap")
        if (self.discarded is not None) != (m % 2 == 1):
            raise AssertionError("a discarded index must be present exactly when m is odd")
        if self.discarded is not None:
            used.add(self.discarded)
        if used != set(range(m)):
            raise AssertionError("partition does not cover every frame")


def random_partition(m: int, rng: np.random.Generator) -> Partition:
    """Uniform random split of ``range(m)`` into two equal halves.

    For odd ``m`` the last entry of the permutation is discarded.
    """
    if m < 2:
        raise ValueError(f"m must be >= 2, got {m}")
    perm = [int(i) for i in rng.permutation(m)]
    h = m // 2
    return Partition(tuple(perm[:h]), tuple(perm[h:2 * h]), perm[2 * h] if m % 2 else None)


def step_rng(seed: int, sample_index: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _RC_TAG, sample_index, step]))


def opd_rc_step_plan(m: int, step: int, rng: np.random.Generator) -> Partition:
    """Partition for one OPD-RC step; ``rng`` should be the per-(sample, step) stream."""
    return random_partition(m, rng)


@dataclass
class PairingPlan:
    strategy: str
    m: int
    seed: int = 0
    static: list[Partition] | None = None
    num_samples: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")

    @property
    def target_source(self) -> str:
        return TARGET_SOURCE[self.strategy]

    def partition(self, sample_index: int, step: int = 0) -> Partition:
        if self.strategy == "n2n":
            return self.static[sample_index]
        if self.strategy == "opd_rc":
            return opd_rc_step_plan(self.m, step, step_rng(self.seed, sample_index, step))
        raise ValueError(f"{self.strategy} does not use partitions")

    def pairs(self, sample_index: int, step: int = 0) -> list[tuple[int, int | None]]:
        """(input frame, label frame) couples; the label is None for n2c (frame average)."""
        if self.strategy == "n2c":
            return [(j, None) for j in range(self.m)]
        if self.strategy == "opd_al":
            raise ValueError("opd_al uses all frames jointly, not pairs")
        return self.partition(sample_index, step).pairs()


def _common_m(stacks: Sequence) -> int:
    ms = {s.m for s in stacks}
    if len(ms) != 1:
        raise ValueError(f"all stacks must share one frame count, got {sorted(ms)}")
    return ms.pop()


def n2n_static_plan(stacks: Sequence, master_seed: int) -> PairingPlan:
    m = _common_m(stacks)
    parts = [random_partition(m, np.random.default_rng(np.random.SeedSequence([master_seed, _N2N_TAG, i])))
             for i in range(len(stacks))]
    return PairingPlan("n2n", m, master_seed, static=parts, num_samples=len(stacks))


def opd_rc_plan(stacks: Sequence, master_seed: int) -> PairingPlan:
    return PairingPlan("opd_rc", _common_m(stacks), master_seed, num_samples=len(stacks))


def n2c_plan(stacks: Sequence) -> PairingPlan:
    return PairingPlan("n2c", _common_m(stacks), num_samples=len(stacks))


def make_plan(strategy: str, stacks: Sequence, seed: int) -> PairingPlan:
    if strategy == "n2c":
        return n2c_plan(stacks)
    if strategy == "n2n":
        return n2n_static_plan(stacks, seed)
    if strategy == "opd_rc":
        return opd_rc_plan(stacks, seed)
    return PairingPlan("opd_al", _common_m(stacks), seed, num_samples=len(stacks))


def pairing_coverage(plan: PairingPlan, steps: int, sample_index: int = 0) -> np.ndarray:
    """``m x m`` table: fraction of steps in which frame j supervised against label k."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    counts = np.zeros((plan.m, plan.m))
    for s in range(steps):
        for j, k in plan.pairs(sample_index, s):
            if k is not None:
                counts[j, k] += 1
    return counts / steps


def partition_coverage(partitions: Sequence[Partition], m: int) -> np.ndarray:
    """Same table as :func:`pairing_coverage`, from already realised partitions."""
    counts = np.zeros((m, m))
    for p in partitions:
        for j, k in p.pairs():
            counts[j, k] += 1
    return counts / max(len(partitions), 1)
