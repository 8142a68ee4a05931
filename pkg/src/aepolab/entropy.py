"""
Token- and window-level entropy statistics.

Token entropies are measured on the distributions a rollout actually sampled from.
Window means smooth them over ``w`` consecutive steps; a batch-level threshold
(the mean of per-trajectory nearest-rank quantiles) turns the window means into a
trigger mask for exploration, and a semantic allowlist gates which triggered
tokens are counted as high-window-entropy (HWE) tokens.
"""

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Literal, Optional

import numpy as np
from scipy.special import entr

if TYPE_CHECKING:
    from .policy import Trajectory

__all__ = [
    "EntropyProfile",
    "SemanticVocab",
    "analyze_trajectories",
    "batch_threshold",
    "hwe_detect",
    "sequence_threshold",
    "token_entropy",
    "trigger_steps",
    "window_entropy",
]

logger = logging.getLogger(__name__)

DetectMode = Literal["window", "single_token"]


def token_entropy(distribution: Sequence[float]) -> float:
    """Shannon entropy in nats, with 0 log 0 taken as 0."""
    p = np.asarray(distribution, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"Distribution must be a non-empty vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError("Distribution entries must be finite and non-negative")
    total = float(p.sum())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"Distribution must sum to 1, got {total!r}")
    return float(entr(p).sum())


def window_entropy(entropies: Sequence[float], w: int) -> np.ndarray:
    """Forward window means; windows running past the end are truncated, not dropped."""
    if w < 1:
        raise ValueError(f"Window size must be positive, got {w}")
    h = np.asarray(entropies, dtype=float)
    n = h.size
    if n == 0:
        return np.zeros(0)
    csum = np.concatenate(([0.0], np.cumsum(h)))
    start = np.arange(n)
    stop = np.minimum(start + w, n)
    return (csum[stop] - csum[start]) / (stop - start)


def sequence_threshold(entropies: Sequence[float], q: float) -> float:
    """Nearest-rank quantile: the sorted entry at index ceil(q * L) - 1."""
    h = np.sort(np.asarray(entropies, dtype=float))
    if h.size == 0:
        raise ValueError("Cannot take a quantile of an empty sequence")
    if not 0.0 < q < 1.0:
        raise ValueError(f"Quantile must lie in (0, 1), got {q}")
    # 1e-9 absorbs binary rounding in q * L (e.g. 0.95 * 20)
    rank = math.ceil(q * h.size - 1e-9)
    idx = min(max(rank - 1, 0), h.size - 1)
    return float(h[idx])


def batch_threshold(profiles: Iterable[Sequence[float]], q: float) -> float:
    thresholds = [sequence_threshold(h, q) for h in profiles]
    if not thresholds:
        raise ValueError("Cannot compute a batch threshold of an empty batch")
    return float(np.mean(thresholds))


@dataclass(frozen=True)
class SemanticVocab:
    """Token ids designated as reasoning triggers."""

    allowlist: frozenset[int]
    stop_token: int

    def __post_init__(self) -> None:
        if not self.allowlist:
            raise ValueError("Semantic allowlist must not be empty")
        if self.stop_token in self.allowlist:
            raise ValueError(f"Semantic allowlist must exclude STOP ({self.stop_token})")

    def __contains__(self, token: object) -> bool:
        return token in self.allowlist

    def member_mask(self, tokens: Sequence[int]) -> np.ndarray:
        return np.fromiter((t in self.allowlist for t in tokens), dtype=bool, count=len(tokens))


@dataclass
class EntropyProfile:
    token_entropies: np.ndarray
    window_means: np.ndarray
    window_size: int
    tau: float
    mode: str
    trigger_mask: np.ndarray
    hwe_mask: np.ndarray
    hwe_count: int = field(init=False)

    def __post_init__(self) -> None:
        self.hwe_count = int(np.count_nonzero(self.hwe_mask))

    def to_record(self) -> dict[str, Any]:
        return {
            "token_entropies": self.token_entropies.tolist(),
            "window_means": self.window_means.tolist(),
            "window_size": self.window_size,
            "tau": self.tau,
            "mode": self.mode,
            "trigger_mask": [bool(m) for m in self.trigger_mask],
            "hwe_mask": [bool(m) for m in self.hwe_mask],
            "hwe_count": self.hwe_count,
        }


def hwe_detect(
    trajectory: "Trajectory",
    tau: float,
    w: int,
    vocab: SemanticVocab,
    mode: DetectMode = "window",
) -> EntropyProfile:
    """Mark high-entropy steps of a trajectory.

    ``window`` mode triggers on window means without semantic gating and counts only
    triggered tokens in the allowlist. ``single_token`` mode marks H_t >= tau on
    allowlisted tokens, and the trigger mask equals the counted mask.
    """
    if not math.isfinite(tau):
        raise ValueError(f"Threshold must be finite, got {tau}")
    h = np.asarray(trajectory.entropies, dtype=float)
    means = window_entropy(h, w)
    in_vocab = vocab.member_mask(trajectory.tokens)
    if mode == "window":
        trigger = means >= tau
        counted = trigger & in_vocab
    elif mode == "single_token":
        trigger = (h >= tau) & in_vocab
        counted = trigger
    else:
        raise ValueError(f"Unknown detection mode: {mode}")
    return EntropyProfile(
        token_entropies=h,
        window_means=means,
        window_size=w,
        tau=float(tau),
        mode=mode,
        trigger_mask=trigger,
        hwe_mask=counted,
    )


def trigger_steps(profile: EntropyProfile, max_triggers: int) -> list[int]:
    """Starts of high-entropy window runs, earliest first."""
    mask = profile.trigger_mask
    starts = [t for t in range(mask.size) if mask[t] and (t == 0 or not mask[t - 1])]
    return starts[: max(max_triggers, 0)]


def analyze_trajectories(
    trajectories: Sequence["Trajectory"],
    w: int,
    q: float,
    vocab: SemanticVocab,
    tau: Optional[float] = None,
) -> tuple[float, list[EntropyProfile]]:
    """Profile a set of trajectories against one threshold.

    Without an explicit ``tau`` the batch threshold over all non-empty trajectories is used.
    """
    if tau is None:
        usable = [t.entropies for t in trajectories if len(t.entropies) > 0]
        if not usable:
            raise ValueError("No non-empty trajectories to derive a threshold from")
        tau = batch_threshold(usable, q)
        logger.info(f"Batch threshold over {len(usable)} trajectories: {tau:.6f}")
    return tau, [hwe_detect(t, tau, w, vocab, "window") for t in trajectories]
