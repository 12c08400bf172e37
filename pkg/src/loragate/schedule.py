"""Linear annealing of the dense-to-gated interpolation factor."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class Schedule:
    """Step window over which the interpolation factor ramps from 0 to 1."""

    start_step: int
    final_step: int
    total_steps: int

    def __post_init__(self):
        if not (0 <= self.start_step <= self.final_step <= self.total_steps):
            raise ConfigError(
                f"schedule requires 0 <= start <= final <= total, got "
                f"({self.start_step}, {self.final_step}, {self.total_steps})"
            )


def gamma(step: int, sched: Schedule) -> float:
    """Interpolation factor at a 0-based optimizer step, clipped to [0, 1].

    When the ramp window is empty the schedule degenerates to a step function
    at ``start_step`` (the limit of the linear ramp).
    """
    span = sched.final_step - sched.start_step
    if span == 0:
        return 0.0 if step < sched.start_step else 1.0
    return min(1.0, max(0.0, (step - sched.start_step) / span))


def schedule_from_fractions(total_steps: int, start_frac: float, end_frac: float) -> Schedule:
    """Build a schedule from epoch fractions (e.g. 0.2 and 0.8 of the steps)."""
    if not (0.0 <= start_frac <= end_frac <= 1.0):
        raise ConfigError(
            f"fractions must satisfy 0 <= start <= end <= 1, got "
            f"({start_frac}, {end_frac})"
        )
    if total_steps < 1:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    return Schedule(
        start_step=math.floor(start_frac * total_steps),
        final_step=math.floor(end_frac * total_steps),
        total_steps=total_steps,
    )
