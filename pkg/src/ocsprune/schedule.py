from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass


@dataclass(frozen=True)
class LRSchedule:
    kind: str = "multistep"          # multistep | cosine
    lr0: float = 0.1
    milestones: tuple[int, ...] = (90, 180, 240, 270)
    decay: float = 0.2
    total_epochs: int = 300


def lr_at(schedule: LRSchedule, epoch: int) -> float:
    if schedule.kind == "multistep":
        return schedule.lr0 * schedule.decay ** bisect_right(schedule.milestones, epoch)
    if schedule.kind == "cosine":
        return schedule.lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / schedule.total_epochs))
    raise ValueError(f"unknown schedule {schedule.kind!r}")
