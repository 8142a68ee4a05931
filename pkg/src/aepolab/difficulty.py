"""
Online difficulty estimation from group rollouts.

A prompt's G primary rollouts give a pass count; the fraction ``pass_count / G`` puts the
prompt in one of three buckets, and each bucket carries its own running high-entropy
token target, shaping multiplier and KL controller state.
"""

import copy
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Optional

import numpy as np

from .entropy import EntropyProfile
from .policy import TaskInstance, Trajectory

if TYPE_CHECKING:
    from .reward import ShapedReward

__all__ = [
    "Bucket",
    "BucketParams",
    "BucketState",
    "RolloutGroup",
    "assign_bucket",
    "bucket_nhe_counts",
    "pass_count",
    "update_bucket_targets",
]

logger = logging.getLogger(__name__)


class Bucket(str, Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


DEFAULT_KL_BUDGETS = {Bucket.EASY: 0.01, Bucket.MEDIUM: 0.02, Bucket.HARD: 0.04}


def assign_bucket(pass_count: int, group_size: int) -> Bucket:
    """easy for f >= 0.75, hard for f <= 0.25, medium otherwise (including 0.25 < f < 0.375)."""
    if group_size < 1:
        raise ValueError(f"Group size must be positive, got {group_size}")
    if not 0 <= pass_count <= group_size:
        raise ValueError(f"pass_count must lie in [0, {group_size}], got {pass_count}")
    # integer comparisons: f >= 3/4 and f <= 1/4
    if 4 * pass_count >= 3 * group_size:
        return Bucket.EASY
    if 4 * pass_count <= group_size:
        return Bucket.HARD
    return Bucket.MEDIUM


@dataclass
class RolloutGroup:
    """G primary rollouts for one prompt, plus any branches that joined the group.

    The bucket always follows from the primary rollouts. ``profiles`` and ``rewards`` are
    aligned with ``members``.
    """

    prompt_id: int
    task: TaskInstance
    trajectories: list[Trajectory]
    branches: list[Trajectory] = field(default_factory=list)
    profiles: list[EntropyProfile] = field(default_factory=list)
    rewards: list["ShapedReward"] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.trajectories:
            raise ValueError(f"Group {self.prompt_id} has no rollouts")

    @property
    def group_size(self) -> int:
        return len(self.trajectories)

    @property
    def pass_count(self) -> int:
        return sum(t.accuracy for t in self.trajectories)

    @property
    def bucket(self) -> Bucket:
        return assign_bucket(self.pass_count, self.group_size)

    @property
    def members(self) -> list[Trajectory]:
        return self.trajectories + self.branches


def pass_count(group: RolloutGroup) -> int:
    return group.pass_count


@dataclass
class BucketParams:
    hwe_target: Optional[float] = None
    multiplier: float = 0.0
    kl_base: float = 0.01
    kl_dual: float = 1.0
    kl_budget: float = 0.02

    def to_dict(self) -> dict[str, Any]:
        return {
            "hwe_target": self.hwe_target,
            "multiplier": self.multiplier,
            "kl_base": self.kl_base,
            "kl_dual": self.kl_dual,
            "kl_budget": self.kl_budget,
        }


@dataclass
class BucketState:
    buckets: dict[Bucket, BucketParams]
    ema_decay: float = 0.9
    kappa_min: float = 0.1
    kappa_max: float = 10.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")
        if not 0 < self.kappa_min <= self.kappa_max:
            raise ValueError(f"Invalid kappa bounds [{self.kappa_min}, {self.kappa_max}]")
        for bucket, params in self.buckets.items():
            if params.multiplier < 0:
                raise ValueError(f"{bucket.value}: multiplier must be nonnegative, got {params.multiplier}")
            if params.kl_base <= 0 or params.kl_budget <= 0:
                raise ValueError(f"{bucket.value}: kl_base and kl_budget must be positive")
            if not self.kappa_min <= params.kl_dual <= self.kappa_max:
                raise ValueError(
                    f"{bucket.value}: kappa {params.kl_dual} outside [{self.kappa_min}, {self.kappa_max}]"
                )

    @classmethod
    def create(
        cls,
        kl_base: float = 0.01,
        kl_budgets: Optional[dict[Bucket, float]] = None,
        ema_decay: float = 0.9,
        kappa_init: float = 1.0,
        kappa_min: float = 0.1,
        kappa_max: float = 10.0,
    ) -> "BucketState":
        budgets = {**DEFAULT_KL_BUDGETS, **(kl_budgets or {})}
        return cls(
            buckets={
                b: BucketParams(kl_base=kl_base, kl_dual=kappa_init, kl_budget=budgets[b]) for b in Bucket
            },
            ema_decay=ema_decay,
            kappa_min=kappa_min,
            kappa_max=kappa_max,
        )

    def __getitem__(self, bucket: Bucket) -> BucketParams:
        return self.buckets[bucket]

    def to_dict(self) -> dict[str, Any]:
        return {
            "ema_decay": self.ema_decay,
            "kappa_min": self.kappa_min,
            "kappa_max": self.kappa_max,
            "buckets": {b.value: p.to_dict() for b, p in self.buckets.items()},
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BucketState":
        return cls(
            buckets={Bucket(k): BucketParams(**v) for k, v in data["buckets"].items()},
            ema_decay=float(data["ema_decay"]),
            kappa_min=float(data["kappa_min"]),
            kappa_max=float(data["kappa_max"]),
        )


def bucket_nhe_counts(groups: Iterable[RolloutGroup]) -> dict[Bucket, np.ndarray]:
    """Counted high-entropy tokens of every group member, pooled per bucket."""
    pooled: dict[Bucket, list[int]] = {}
    for group in groups:
        if len(group.profiles) != len(group.members):
            raise ValueError(
                f"Group {group.prompt_id} has {len(group.profiles)} profiles for {len(group.members)} members"
            )
        pooled.setdefault(group.bucket, []).extend(p.hwe_count for p in group.profiles)
    return {b: np.asarray(v, dtype=float) for b, v in pooled.items()}


def update_bucket_targets(state: BucketState, groups: Sequence[RolloutGroup]) -> BucketState:
    """EMA of each present bucket's batch mean N_HE; absent buckets keep their target.

    A bucket seen for the first time takes the batch mean as its target.
    """
    if not groups:
        raise ValueError("Cannot update bucket targets from an empty batch")
    new_state = copy.deepcopy(state)
    for bucket, counts in bucket_nhe_counts(groups).items():
        params = new_state.buckets[bucket]
        batch_mean = float(counts.mean())
        if params.hwe_target is None:
            params.hwe_target = batch_mean
        else:
            params.hwe_target = state.ema_decay * params.hwe_target + (1.0 - state.ema_decay) * batch_mean
        logger.debug(f"{bucket.value}: batch N_HE mean {batch_mean:.3f}, target now {params.hwe_target:.3f}")
    return new_state
