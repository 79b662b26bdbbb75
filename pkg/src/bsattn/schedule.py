"""Annealed sparsity schedule and the split of a sparsity target into (r, KV keep)."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import ConfigError


@dataclass(frozen=True)
class AnnealSchedule:
    step_interval: int = 30
    increment: float = 0.03
    cap: float = 0.9
    kv_start_fraction: float = 1.0
    kv_end_fraction: float = 0.1
    r_fixed: float = 0.5
    horizon: int = 9000

    def __post_init__(self):
        if self.step_interval < 1 or not self.increment > 0:
            raise ConfigError("step_interval must be >= 1 and increment > 0")
        if not 0 < self.cap <= 1:
            raise ConfigError(f"cap must be in (0, 1], got {self.cap}")
        if self.kv_end_fraction > self.kv_start_fraction:
            raise ConfigError("kv_end_fraction must not exceed kv_start_fraction")
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")


DEFAULT_SCHEDULE = AnnealSchedule()


def sparsity_at_step(step: int, schedule: AnnealSchedule = DEFAULT_SCHEDULE) -> float:
    """``min(cap, increment * floor(step / step_interval))``.

    Evaluated in exact decimal arithmetic and rounded once, so step 30*m gives
    the double nearest to 0.03*m.
    """
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    m = int(step) // schedule.step_interval
    s = Fraction(str(schedule.increment)) * m
    return float(min(s, Fraction(str(schedule.cap))))


def kv_fraction_at_step(step: int, total_anneal_steps: int | None = None,
                        schedule: AnnealSchedule = DEFAULT_SCHEDULE) -> float:
    """k / N, linear from ``kv_start_fraction`` to ``kv_end_fraction`` over the horizon."""
    total = schedule.horizon if total_anneal_steps is None else total_anneal_steps
    if total <= 0:
        raise ConfigError("total_anneal_steps must be > 0")
    t = min(max(step, 0) / total, 1.0)
    start, end = schedule.kv_start_fraction, schedule.kv_end_fraction
    return max(end, start + (end - start) * t)


def knobs_for_sparsity(s_target: float, r_fixed: float = 0.5) -> tuple[float, float]:
    """Split a pair-sparsity target into ``(r, kv_keep_fraction)``.

    r stays at ``r_fixed`` while the KV side can absorb the rest; below
    ``1 - r_fixed`` the KV side is dense and r itself relaxes.
    """
    if not 0.0 <= s_target < 1.0:
        raise ConfigError(f"target sparsity must lie in [0, 1), got {s_target}")
    if not 0.0 < r_fixed <= 1.0:
        raise ConfigError(f"r_fixed must lie in (0, 1], got {r_fixed}")
    kv_keep = (1.0 - s_target) / r_fixed
    if kv_keep <= 1.0:
        return r_fixed, kv_keep
    return 1.0 - s_target, 1.0


def schedule_rows(steps: int, every: int | None = None, schedule: AnnealSchedule = DEFAULT_SCHEDULE):
    """(step, sparsity, r, kv_keep, kv_fraction) every ``every`` steps up to ``steps``."""
    every = schedule.step_interval if every is None else every
    if every < 1:
        raise ConfigError("every must be >= 1")
    for step in range(0, int(steps) + 1, every):
        s = sparsity_at_step(step, schedule)
        r, kv_keep = knobs_for_sparsity(s, schedule.r_fixed)
        yield step, s, r, kv_keep, kv_fraction_at_step(step, schedule=schedule)
