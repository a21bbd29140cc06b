"""Curriculum over randomization magnitude.

Nothing is randomized up to the threshold step; afterwards the magnitude
follows 1 - exp(-k (step - threshold)). The same magnitude scales camera,
physics and appearance randomization, and the threshold also decides which
view feeds the augmented critic objective.
"""

from __future__ import annotations
from typing import Optional

from dataclasses import dataclass
import math

from .config import CurriculumConfig, default_rate
from .errors import InvalidSpecError
from .simenv import RandomizationSpec, View

_BELOW_ONE = math.nextafter(1.0, 0.0)


def magnitude_at(step: int, threshold: int, k: float) -> float:
    if not k > 0:
        raise InvalidSpecError(f"Curriculum rate must be positive, got {k}")
    if step <= threshold:
        return 0.0
    # Stays below 1 even once expm1 rounds to -1.
    return min(-math.expm1(-k * (step - threshold)), _BELOW_ONE)


def scaled_spec(spec: RandomizationSpec, m: float) -> RandomizationSpec:
    if not 0.0 <= m <= 1.0:
        raise InvalidSpecError(f"magnitude must be in [0, 1], got {m}")
    return spec.scaled(m)


def aug_view_selector(step: int, threshold: int) -> View:
    # The threshold step itself still belongs to the fixed view.
    return View.FIXED if step <= threshold else View.MOVING


@dataclass
class CurriculumState:
    step: int = 0
    threshold_step: int = 200000
    rate: float = math.log(20.0) / 400000.0
    # Pinned magnitude for runs without a curriculum.
    pinned: Optional[float] = None

    @classmethod
    def from_config(cls, config: CurriculumConfig, step: int = 0) -> "CurriculumState":
        rate = config.rate if config.rate is not None else default_rate(config.threshold)
        return cls(
            step=step,
            threshold_step=config.threshold,
            rate=rate,
            pinned=None if config.enabled else 1.0,
        )

    @property
    def magnitude(self) -> float:
        if self.pinned is not None:
            return self.pinned
        return magnitude_at(self.step, self.threshold_step, self.rate)

    @property
    def view(self) -> View:
        if self.pinned is not None:
            return View.MOVING
        return aug_view_selector(self.step, self.threshold_step)

    def at(self, step: int) -> "CurriculumState":
        return CurriculumState(step, self.threshold_step, self.rate, self.pinned)

    def as_record(self) -> dict:
        return {"step": self.step, "magnitude": self.magnitude, "view": self.view.value}
