"""Linear warmup followed by cosine decay to a floor."""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ScheduleConfig:
    total_epochs: int
    steps_per_epoch: int
    warmup_epochs: int = 5
    lr_init: float = 5e-5
    lr_min: float = 2e-5

    def __post_init__(self):
        if self.lr_min > self.lr_init:
            raise ValueError("lr_min must not exceed lr_init")
        if self.steps_per_epoch < 1 or self.total_epochs < 1:
            raise ValueError("need at least one epoch of at least one step")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def schedule_lr(cfg: ScheduleConfig, step: int) -> float:
    """Learning rate at 0-based ``step``; the last step (total_steps - 1) gets ``lr_min``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    warm = cfg.warmup_steps
    if step < warm:
        return cfg.lr_init * step / warm
    span = cfg.total_steps - 1 - warm
    progress = 1.0 if span <= 0 else min(1.0, (step - warm) / span)
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))
