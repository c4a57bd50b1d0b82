"""Three-stage timestep partition, training-time clamping, and loss-weight ratios."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, Tuple


class Stage(enum.Enum):
    RAPID_SEGMENTATION = "rapid_segmentation"
    PROBABILISTIC_MODELING = "probabilistic_modeling"
    DENOISING_REFINEMENT = "denoising_refinement"


DEFAULT_WEIGHTS: Dict[Stage, Tuple[float, float]] = {
    Stage.RAPID_SEGMENTATION: (1.0, 3.0),
    Stage.PROBABILISTIC_MODELING: (1.0, 1.0),
    Stage.DENOISING_REFINEMENT: (3.0, 1.0),
}


@dataclass(frozen=True)
class StagePolicy:
    """Stage boundaries and per-stage (alpha, beta) loss weights.

    Timesteps above high_threshold belong to the rapid-segmentation stage,
    those in (low_threshold, high_threshold] to probabilistic modeling, and
    t <= low_threshold to denoising refinement. Training draws in the outer
    stages are clamped to clamp_high / clamp_low respectively.
    """

    high_threshold: int = 599
    low_threshold: int = 299
    weights: Dict[Stage, Tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_WEIGHTS)
    )
    clamp_high: int = 999
    clamp_low: int = 0
    num_timesteps: int = 1000

    def __post_init__(self):
        if not 0 <= self.low_threshold < self.high_threshold < self.num_timesteps:
            raise ValueError(
                f"need 0 <= low ({self.low_threshold}) < high ({self.high_threshold}) "
                f"< T ({self.num_timesteps})"
            )
        for stage in Stage:
            a, b = self.weights[stage]
            if a <= 0 or b <= 0:
                raise ValueError(f"weights for {stage} must be strictly positive, got {(a, b)}")


def stage_of(t: int, policy: StagePolicy) -> Stage:
    """Map a timestep to its stage; both thresholds belong to the stage below them."""
    if not 0 <= t < policy.num_timesteps:
        raise ValueError(f"timestep {t} outside [0, {policy.num_timesteps - 1}]")
    if t > policy.high_threshold:
        return Stage.RAPID_SEGMENTATION
    if t > policy.low_threshold:
        return Stage.PROBABILISTIC_MODELING
    return Stage.DENOISING_REFINEMENT


def remap_training_timestep(t_raw: int, policy: StagePolicy) -> int:
    """Clamp a uniform draw to the stage's training timestep.

    Rapid-stage draws collapse to clamp_high, refinement-stage draws to
    clamp_low; the probabilistic band passes through unchanged.
    """
    stage = stage_of(t_raw, policy)
    if stage is Stage.RAPID_SEGMENTATION:
        return policy.clamp_high
    if stage is Stage.DENOISING_REFINEMENT:
        return policy.clamp_low
    return t_raw


def loss_weights(stage: Stage, policy: StagePolicy) -> Tuple[float, float]:
    """(alpha, beta) multipliers for the noise and mask loss terms."""
    return policy.weights[stage]
