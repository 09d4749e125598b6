"""Compression-ratio sampling: progressive Beta schedule, uniform, and full grid."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .numkit import Rng
from .tokenizer import ratio_grid

MODES = ("progressive", "uniform", "full_grid")


@dataclass(frozen=True)
class BetaSchedule:
    alpha_start: float = 80.0
    alpha_end: float = 5.0
    beta: float = 5.0
    total_steps: int = 2000
    mode: str = "progressive"
    T: int = 8
    # fraction of total_steps over which alpha decays; constant afterwards
    decay_fraction: float = 0.6

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown schedule mode {self.mode!r}; expected one of {MODES}")
        if not (self.alpha_start >= self.alpha_end > 0 and self.beta > 0):
            raise ValueError("need alpha_start >= alpha_end > 0 and beta > 0")

    @classmethod
    def uniform(cls, total_steps: int = 0, T: int = 8) -> "BetaSchedule":
        return cls(1.0, 1.0, 1.0, total_steps, "uniform", T)

    @classmethod
    def full_grid(cls, total_steps: int = 0, T: int = 8) -> "BetaSchedule":
        return cls(total_steps=total_steps, mode="full_grid", T=T)

    def to_dict(self) -> dict:
        return asdict(self)


def alpha_at(schedule: BetaSchedule, step: int) -> float:
    """Geometric decay from ``alpha_start`` to ``alpha_end`` over the decay horizon."""
    if schedule.mode == "uniform":
        return 1.0
    horizon = schedule.decay_fraction * schedule.total_steps
    if horizon <= 0 or step >= horizon:
        return float(schedule.alpha_end)
    frac = max(step, 0) / horizon
    return float(schedule.alpha_start * (schedule.alpha_end / schedule.alpha_start) ** frac)


def beta_at(schedule: BetaSchedule) -> float:
    return 1.0 if schedule.mode == "uniform" else float(schedule.beta)


def sample_beta(alpha: float, beta: float, rng: Rng, size=None) -> np.ndarray:
    """Beta(alpha, beta) draws via the ratio of two Gamma variates."""
    x = rng.gamma(alpha, size)
    y = rng.gamma(beta, size)
    return x / (x + y)


def sample_raw_ratio(schedule: BetaSchedule, step: int, rng: Rng) -> float:
    r = float(sample_beta(alpha_at(schedule, step), beta_at(schedule), rng))
    # r == 1.0 can only arise from float rounding of a ~1 draw
    return min(r, math.nextafter(1.0, 0.0))


def snap_to_grid(r: float, T: int) -> float:
    """Largest grid ratio j/T not above ``r``.

    Every grid point, including r = 0, owns an interval of width 1/T, so a
    continuous draw reaches every decoder cluster.
    """
    if not 0.0 <= r < 1.0:
        raise ValueError(f"compression ratio must lie in [0, 1), got {r}")
    return min(math.floor(r * T + 1e-9), T - 1) / T


def sample_ratio(schedule: BetaSchedule, step: int, rng: Rng):
    """One grid ratio, or the whole grid in ``full_grid`` mode."""
    if schedule.mode == "full_grid":
        return ratio_grid(schedule.T)
    return snap_to_grid(sample_raw_ratio(schedule, step, rng), schedule.T)


def sample_batch_ratios(schedule: BetaSchedule, step: int, count: int, rng: Rng) -> list[float]:
    """``count`` distinct grid ratios, in draw order.

    After ``100 * count`` draws without enough distinct points, the remainder
    is filled with the unused grid points nearest the distribution mean.
    """
    T = schedule.T
    if schedule.mode == "full_grid":
        return ratio_grid(T)
    if not 1 <= count <= T:
        raise ValueError(f"count must lie in [1, {T}]")
    chosen: list[float] = []
    for _ in range(100 * count):
        r = sample_ratio(schedule, step, rng)
        if r not in chosen:
            chosen.append(r)
            if len(chosen) == count:
                return chosen
    a, b = alpha_at(schedule, step), beta_at(schedule)
    target = a / (a + b)
    unused = [g for g in ratio_grid(T) if g not in chosen]
    unused.sort(key=lambda g: (abs(g - target), g))
    return chosen + unused[: count - len(chosen)]
