"""Learning-rate schedule: linear warmup to a peak, then linear decay down to
a fixed fraction of the peak."""

from __future__ import annotations

from dataclasses import dataclass

# defaults mirror the two training phases of the reference recipe
ASR_PEAK_LR = 2e-4
DST_PEAK_LR = 5e-5


@dataclass
class LRSchedule:
    peak: float = ASR_PEAK_LR
    warmup_steps: int = 1000
    total_steps: int = 100_000
    floor_frac: float = 0.01

    def __post_init__(self):
        if not (0 < self.warmup_steps <= self.total_steps):
            raise ValueError(f"need 0 < warmup_steps <= total_steps, got {self.warmup_steps}/{self.total_steps}")
        if self.peak <= 0:
            raise ValueError("peak learning rate must be positive")


def lr_at(schedule: LRSchedule, step: int) -> float:
    """Piecewise-linear rate: 0 -> peak over the warmup, then peak ->
    floor_frac * peak over the rest; steps past the end clamp to the floor."""
    if step < 0:
        raise ValueError(f"negative step {step}")
    if step <= schedule.warmup_steps:
        return schedule.peak * step / schedule.warmup_steps
    floor = schedule.floor_frac * schedule.peak
    if step >= schedule.total_steps:
        return floor
    span = schedule.total_steps - schedule.warmup_steps
    frac = (step - schedule.warmup_steps) / span
    return schedule.peak + (floor - schedule.peak) * frac
