"""Learning-rate schedules: a piecewise warmup phase and a cyclic
cosine-annealing phase with per-cycle peak decay that drives weight
snapshotting at cycle ends."""
from __future__ import annotations

import math
from dataclasses import dataclass

WARMUP_TOTAL_EPOCHS = 350


def warmup_lr(t: int) -> float:
    """Piecewise warmup value for epoch t in [1, 350]: a linear ramp to
    3e-2 over the first 10 epochs, then plateaus 3e-2, 3e-3, 3e-4."""
    if not 1 <= t <= WARMUP_TOTAL_EPOCHS:
        raise ValueError(f"warmup epoch {t} outside [1, {WARMUP_TOTAL_EPOCHS}]")
    if t <= 10:
        return 3e-2 * t / 10
    if t <= 150:
        return 3e-2
    if t <= 225:
        return 3e-3
    return 3e-4


@dataclass
class ScheduleState:
    """Cyclic-phase settings plus the trainer's position in the run."""
    epoch: int = 0
    phase: str = "warmup-main"  # or "cyclic"
    base_lr: float = 3e-4       # continues the final warmup plateau
    cycle_length: int = 35
    cycle_count: int = 15
    decay: float = 0.7
    min_lr: float = 0.0

    def __post_init__(self):
        if self.cycle_length < 1 or self.cycle_count < 1:
            raise ValueError("cycle length and count must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must be in (0, 1]")
        if self.min_lr < 0:
            raise ValueError("min lr must be >= 0")

    @property
    def total_cyclic_epochs(self) -> int:
        return self.cycle_length * self.cycle_count


def cyclic_lr(e: int, state: ScheduleState) -> float:
    """Cosine annealing within each cycle; the peak of cycle k is
    base * decay^k.  e counts epochs from the start of the cyclic phase."""
    total = state.total_cyclic_epochs
    if not 0 <= e < total:
        raise ValueError(f"cyclic epoch {e} outside [0, {total})")
    k = e // state.cycle_length
    tau = (e % state.cycle_length) / state.cycle_length
    peak = state.base_lr * state.decay ** k
    return state.min_lr + (peak - state.min_lr) * (1.0 + math.cos(math.pi * tau)) / 2.0


def is_snapshot_epoch(e: int, state: ScheduleState) -> bool:
    """True on the last epoch of each cycle, when weights are averaged in."""
    total = state.total_cyclic_epochs
    if not 0 <= e < total:
        raise ValueError(f"cyclic epoch {e} outside [0, {total})")
    return e % state.cycle_length == state.cycle_length - 1


def dump_schedule(phase: str, state: ScheduleState | None = None) -> list[tuple[int, float]]:
    """(epoch, lr) rows for the requested phase, for CSV emission."""
    if phase == "warmup":
        return [(t, warmup_lr(t)) for t in range(1, WARMUP_TOTAL_EPOCHS + 1)]
    if phase == "cyclic":
        state = state or ScheduleState()
        return [(e, cyclic_lr(e, state)) for e in range(state.total_cyclic_epochs)]
    raise ValueError(f"unknown phase {phase!r}; expected 'warmup' or 'cyclic'")
