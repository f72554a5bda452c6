"""Learning-rate schedules used by the training recipes.

Two schedules are provided: a half-period cosine decay for the crop
classifier and a stepwise 10x decay for the detector.
"""

from __future__ import annotations

import math
from collections.abc import Sequence


def cosine_lr(t: int | float, t_max: int | float, base: float = 0.01) -> float:
    """Half-period cosine decay: base * (0.5 + 0.5 * cos(t * pi / t_max)).

    Starts at ``base`` for t=0 and reaches exactly 0.0 at t=t_max.
    """
    if t_max <= 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    if t < 0:
        raise ValueError(f"step must be non-negative, got {t}")
    if t > t_max:
        raise ValueError(f"step {t} exceeds t_max {t_max}")
    return base * (0.5 + 0.5 * math.cos(math.pi * (t / t_max)))


def step_lr(step: int, base: float, decay_steps: Sequence[int], factor: float = 0.1) -> float:
    """Stepwise decay: multiply ``base`` by ``factor`` at each decay step.

    The decayed rate applies from the decay step onwards (inclusive).
    """
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    rate = base
    for boundary in decay_steps:
        if step >= boundary:
            rate *= factor
    return rate
