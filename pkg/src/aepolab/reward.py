"""
Accuracy reward with difficulty-aware entropy shaping.

Each bucket has a one-sided (or, for medium, symmetric) direction function ``g_d`` that
turns the deviation of a response's high-entropy token count from the bucket target into
a penalty magnitude. In ``canonical`` mode the penalty only touches incorrect responses.
``encourage`` mode instead rewards surplus high-entropy tokens on hard prompts.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional, Union

import numpy as np

from .difficulty import Bucket, RolloutGroup

__all__ = [
    "REWARD_CSV_HEADER",
    "RewardMode",
    "ShapedReward",
    "deviation",
    "hierarchical_reward",
    "lagrange_multiplier",
    "online_filter",
    "shaping_curve",
    "shaping_direction",
]

logger = logging.getLogger(__name__)

REWARD_CSV_HEADER = ["bucket", "accuracy", "n_he", "target", "deviation", "multiplier", "entropy_term", "total"]


class RewardMode(str, Enum):
    CANONICAL = "canonical"
    ENCOURAGE = "encourage"


@dataclass(frozen=True)
class ShapedReward:
    accuracy_reward: int
    deviation: float
    shaping: float
    multiplier: float
    entropy_term: float
    total: float
    mode: RewardMode
    bucket: Bucket
    n_he: Optional[int] = None
    target: Optional[float] = None

    def to_row(self) -> list[Any]:
        return [
            self.bucket.value,
            self.accuracy_reward,
            self.n_he,
            self.target,
            self.deviation,
            self.multiplier,
            self.entropy_term,
            self.total,
        ]


def deviation(n_he: int, target: float) -> float:
    if n_he < 0:
        raise ValueError(f"High-entropy token count must be nonnegative, got {n_he}")
    return float(n_he - target)


def shaping_direction(delta: float, bucket: Union[Bucket, str]) -> float:
    bucket = Bucket(bucket)
    if bucket is Bucket.EASY:
        return max(0.0, delta)
    if bucket is Bucket.MEDIUM:
        return abs(delta)
    return max(0.0, -delta)


def lagrange_multiplier(batch_mean_nhe: float, target: float, batch_var_nhe: float, eps: float = 1e-8) -> float:
    if batch_var_nhe < 0:
        raise ValueError(f"Variance must be nonnegative, got {batch_var_nhe}")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    return max(0.0, (batch_mean_nhe - target) / (batch_var_nhe + eps))


def hierarchical_reward(
    accuracy: int,
    delta: float,
    bucket: Union[Bucket, str],
    lam: float,
    mode: Union[RewardMode, str] = RewardMode.CANONICAL,
    n_he: Optional[int] = None,
    target: Optional[float] = None,
) -> ShapedReward:
    if accuracy not in (0, 1):
        raise ValueError(f"Accuracy reward must be 0 or 1, got {accuracy}")
    if lam < 0:
        raise ValueError(f"Multiplier must be nonnegative, got {lam}")
    bucket = Bucket(bucket)
    mode = RewardMode(mode)
    g = shaping_direction(delta, bucket)
    if mode is RewardMode.ENCOURAGE and bucket is Bucket.HARD:
        surplus = max(0.0, delta)
        term = lam * surplus if surplus > 0 else 0.0
    elif accuracy == 0 and g > 0:
        term = -lam * g
    else:
        term = 0.0
    return ShapedReward(
        accuracy_reward=accuracy,
        deviation=float(delta),
        shaping=g,
        multiplier=float(lam),
        entropy_term=term,
        total=accuracy + term,
        mode=mode,
        bucket=bucket,
        n_he=n_he,
        target=target,
    )


def online_filter(groups: Sequence[RolloutGroup], lo: float = 0.01, hi: float = 0.99) -> list[RolloutGroup]:
    """Keep groups whose mean total reward lies in [lo, hi]."""
    if not lo < hi:
        raise ValueError(f"Filter bounds must satisfy lo < hi, got [{lo}, {hi}]")
    kept = []
    for group in groups:
        if not group.rewards:
            raise ValueError(f"Group {group.prompt_id} has not been scored")
        mean = float(np.mean([r.total for r in group.rewards]))
        if lo <= mean <= hi:
            kept.append(group)
    logger.debug(f"Online filter kept {len(kept)}/{len(groups)} groups")
    return kept


def shaping_curve(
    deltas: Sequence[float],
    bucket: Union[Bucket, str],
    lam: float,
    accuracy: int = 0,
    mode: Union[RewardMode, str] = RewardMode.CANONICAL,
) -> np.ndarray:
    """Entropy term across a grid of deviations."""
    return np.array([hierarchical_reward(accuracy, d, bucket, lam, mode).entropy_term for d in deltas])
