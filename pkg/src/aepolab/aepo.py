"""
Adaptive-entropy policy optimization and its GRPO/DAPO baselines.

One :func:`train_step` is a read phase followed by a write phase. The read phase samples
rollouts (optionally on a thread pool), measures entropies, branches at high-entropy
windows, buckets prompts and scores responses; nothing in it writes to the policy. The
write phase computes advantages and token KL terms, takes a few clipped-surrogate SGD
steps and finally updates the per-bucket KL controller.
"""

import logging
import math
from collections.abc import Sequence
from concurrent.futures import Executor
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Optional, TypeVar

import numpy as np
from scipy.special import log_softmax, rel_entr

from .config import ExperimentConfig
from .difficulty import Bucket, BucketState, RolloutGroup, bucket_nhe_counts, update_bucket_targets
from .entropy import EntropyProfile, SemanticVocab, batch_threshold, hwe_detect, trigger_steps
from .policy import (
    GradientTable,
    PolicyTable,
    TaskFamily,
    TaskInstance,
    Trajectory,
    branch_rollouts,
    make_task,
    sample_rollout,
)
from .reward import ShapedReward, deviation, hierarchical_reward, lagrange_multiplier, online_filter
from .seeding import ROLLOUT_STREAM, TASK_STREAM, derive_seed, rng_for

__all__ = [
    "AdvantageSet",
    "KlReport",
    "MetricRecord",
    "Mode",
    "SurrogateResult",
    "TrainState",
    "UpdateItem",
    "group_centered_token_advantage",
    "grpo_advantage",
    "kl_controller_update",
    "kl_weights",
    "sample_prompts",
    "surrogate_loss",
    "token_entropy_bonus",
    "token_kl",
    "train_step",
]

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class Mode(str, Enum):
    AEPO = "aepo"
    GRPO = "grpo"
    DAPO = "dapo"


def grpo_advantage(rewards: Sequence[float], eps: float = 1e-8) -> np.ndarray:
    """(r - mean) / (std + eps) with the population standard deviation."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError(f"Group-normalized advantages need at least 2 rewards, got {r.size}")
    centered = r - r.mean()
    std = float(r.std())
    if std + eps == 0.0:
        return np.zeros_like(r)
    return centered / (std + eps)


def group_centered_token_advantage(rewards: Sequence[float], lengths: Sequence[int]) -> list[np.ndarray]:
    r = np.asarray(rewards, dtype=float)
    if len(lengths) != r.size:
        raise ValueError(f"Got {r.size} rewards but {len(lengths)} lengths")
    if any(n < 1 for n in lengths):
        raise ValueError(f"Lengths must be positive, got {list(lengths)}")
    centered = r - r.mean()
    return [np.full(n, c / n) for c, n in zip(centered, lengths)]


def token_entropy_bonus(profiles: Sequence[EntropyProfile], tau: float, lam: float) -> list[np.ndarray]:
    """psi = lam * max(0, window_mean - tau) * trigger - b, with b the group mean of the first term."""
    if lam < 0:
        raise ValueError(f"Multiplier must be nonnegative, got {lam}")
    raw = [lam * np.maximum(0.0, p.window_means - tau) * p.trigger_mask for p in profiles]
    n_tokens = sum(x.size for x in raw)
    if n_tokens == 0:
        return raw
    baseline = float(sum(x.sum() for x in raw)) / n_tokens
    return [x - baseline for x in raw]


def token_kl(policy: PolicyTable, trajectory: Trajectory) -> np.ndarray:
    """Exact KL(pi_theta || pi_ref) at every visited state, on the unscaled softmax."""
    trajectory.check_contexts()
    return np.array([rel_entr(policy.probs(ctx), policy.ref_probs(ctx)).sum() for ctx in trajectory.contexts])


def kl_weights(mask: Sequence[bool], beta: float, rho: float) -> np.ndarray:
    if beta <= 0:
        raise ValueError(f"KL base coefficient must be positive, got {beta}")
    if not 0 < rho <= 1:
        raise ValueError(f"KL relaxation must lie in (0, 1], got {rho}")
    return np.where(np.asarray(mask, dtype=bool), beta * rho, beta)


def kl_controller_update(
    kappa: float,
    kl_ctrl: float,
    delta: float,
    alpha: float,
    kappa_min: float,
    kappa_max: float,
) -> float:
    """Multiplicative dual step kappa * (1 + alpha * (kl_ctrl / delta - 1)), clipped to the bounds."""
    if delta <= 0:
        raise ValueError(f"KL budget must be positive, got {delta}")
    if not 0 < kappa_min <= kappa_max:
        raise ValueError(f"Invalid kappa bounds [{kappa_min}, {kappa_max}]")
    updated = kappa * (1.0 + alpha * (kl_ctrl / delta - 1.0))
    return float(min(max(updated, kappa_min), kappa_max))


@dataclass
class AdvantageSet:
    group_advantage: np.ndarray
    shaping: np.ndarray

    @property
    def shaped(self) -> np.ndarray:
        return self.group_advantage + self.shaping


@dataclass
class KlReport:
    kld: np.ndarray
    weights: np.ndarray
    control_mask: np.ndarray

    @property
    def control_kl(self) -> Optional[float]:
        if not self.control_mask.any():
            return None
        return float(self.kld[self.control_mask].mean())


@dataclass
class UpdateItem:
    """One trajectory's constant inputs to the surrogate: shaped advantages, KL weights and kappa."""

    trajectory: Trajectory
    advantages: np.ndarray
    kl_weights: np.ndarray
    kl_coef: float = 0.0


@dataclass
class SurrogateResult:
    loss: float
    gradient: GradientTable
    clip_fraction: float
    policy_loss: float
    kl_loss: float


def surrogate_loss(
    policy: PolicyTable,
    items: Sequence[UpdateItem],
    clip_low: float,
    clip_high: float,
    aggregation: str = "sequence",
) -> SurrogateResult:
    """Clipped surrogate plus token-weighted KL, and its exact gradient.

    Ratios are against ``old_weights``, KL against ``reference_weights``; both use the
    unscaled softmax. ``sequence`` aggregation averages per-trajectory token means over all
    trajectories; ``token`` aggregation averages over all tokens. Advantages are constants.
    """
    if not (0 < clip_low < 1 and 0 < clip_high < 1):
        raise ValueError(f"Clip ranges must lie in (0, 1), got ({clip_low}, {clip_high})")
    if aggregation not in ("sequence", "token"):
        raise ValueError(f"Unknown aggregation: {aggregation}")
    n_tokens = sum(item.trajectory.length for item in items)
    if not items or n_tokens == 0:
        return SurrogateResult(0.0, {}, 0.0, 0.0, 0.0)

    policy_loss = 0.0
    kl_loss = 0.0
    clipped = 0
    grad: GradientTable = {}
    for item in items:
        traj = item.trajectory
        adv = np.asarray(item.advantages, dtype=float)
        weights = np.asarray(item.kl_weights, dtype=float)
        if adv.shape != (traj.length,) or weights.shape != (traj.length,):
            raise ValueError(
                f"Trajectory of length {traj.length} got advantages {adv.shape} and KL weights {weights.shape}"
            )
        traj.check_contexts()
        norm = 1.0 / (len(items) * traj.length) if aggregation == "sequence" else 1.0 / n_tokens
        for ctx, token, a, beta in zip(traj.contexts, traj.tokens, adv, weights):
            log_p = log_softmax(policy.logits(ctx))
            p = np.exp(log_p)
            ratio = math.exp(log_p[token] - log_softmax(policy.old_logits(ctx))[token])
            bounded = min(max(ratio, 1.0 - clip_low), 1.0 + clip_high)
            unclipped_term = ratio * a
            clipped_term = bounded * a
            g = np.zeros(policy.vocab_size)
            if unclipped_term <= clipped_term:
                policy_loss -= norm * unclipped_term
                # d(r a)/d theta = a r (onehot - p)
                g -= norm * a * ratio * (np.eye(1, policy.vocab_size, token)[0] - p)
            else:
                policy_loss -= norm * clipped_term
                clipped += 1
            coef = norm * item.kl_coef * beta
            if coef != 0.0:
                log_ref = log_softmax(policy.ref_logits(ctx))
                kl = float(rel_entr(p, np.exp(log_ref)).sum())
                kl_loss += coef * kl
                g += coef * p * (log_p - log_ref - kl)
            if ctx in grad:
                grad[ctx] += g
            else:
                grad[ctx] = g
    return SurrogateResult(
        loss=policy_loss + kl_loss,
        gradient=grad,
        clip_fraction=clipped / n_tokens,
        policy_loss=policy_loss,
        kl_loss=kl_loss,
    )


@dataclass
class TrainState:
    config: ExperimentConfig
    policy: PolicyTable
    buckets: BucketState
    iteration: int = 0

    @classmethod
    def initial(cls, config: ExperimentConfig) -> "TrainState":
        policy = PolicyTable(config.vocab_size, config.context_order)
        policy.freeze_reference()
        policy.refresh_old()
        return cls(config=config, policy=policy, buckets=_fresh_buckets(config))

    @property
    def warming_up(self) -> bool:
        return self.iteration < self.config.warmup_iterations

    @property
    def family(self) -> TaskFamily:
        return TaskFamily(self.config.vocab_size, self.config.n_connectives)

    @property
    def vocab(self) -> SemanticVocab:
        family = self.family
        allowlist = self.config.semantic_allowlist or family.connectives
        return SemanticVocab(frozenset(allowlist), family.stop_token)


def _fresh_buckets(config: ExperimentConfig) -> BucketState:
    return BucketState.create(
        kl_base=config.kl_base,
        kl_budgets=config.kl_budgets,
        ema_decay=config.ema_decay,
        kappa_init=config.kappa_init,
        kappa_min=config.kappa_min,
        kappa_max=config.kappa_max,
    )


@dataclass
class MetricRecord:
    iteration: int
    mode: str
    stage: str
    accuracy_mean: float
    length_mean: float
    nhe_mean: float
    filtered_fraction: float
    tau_high: float
    loss: Optional[float]
    clip_fraction: Optional[float]
    skipped: bool
    n_groups: int
    n_trajectories: int
    n_branches: int
    fallback_count: int
    buckets: dict[str, dict[str, Any]]

    def to_record(self) -> dict[str, Any]:
        return {
            "type": "metrics",
            "iter": self.iteration,
            "mode": self.mode,
            "stage": self.stage,
            "accuracy_mean": self.accuracy_mean,
            "length_mean": self.length_mean,
            "nhe_mean": self.nhe_mean,
            "filtered_fraction": self.filtered_fraction,
            "tau_high": self.tau_high,
            "loss": self.loss,
            "clip_fraction": self.clip_fraction,
            "skipped": self.skipped,
            "n_groups": self.n_groups,
            "n_trajectories": self.n_trajectories,
            "n_branches": self.n_branches,
            "fallback_count": self.fallback_count,
            "buckets": self.buckets,
        }


def sample_prompts(config: ExperimentConfig, iteration: int) -> list[TaskInstance]:
    family = TaskFamily(config.vocab_size, config.n_connectives)
    weights = np.asarray(config.task_weights or [1.0] * len(config.task_knobs), dtype=float)
    weights = weights / weights.sum()
    prompts = []
    for j in range(config.batch_size):
        seed = derive_seed(config.seed, TASK_STREAM, iteration, j)
        knob = int(rng_for(seed).choice(config.task_knobs, p=weights))
        prompts.append(make_task(knob, seed, family))
    return prompts


def _map(fn: Callable[[T], R], items: Sequence[T], pool: Optional[Executor]) -> list[R]:
    if pool is None:
        return [fn(x) for x in items]
    return list(pool.map(fn, items))


def _mean_or_none(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


def _score_groups(state: TrainState, groups: list[RolloutGroup], shaping_on: bool) -> None:
    """Per-bucket multipliers from batch statistics against the previous targets, then rewards."""
    cfg = state.config
    counts = bucket_nhe_counts(groups)
    lambdas: dict[Bucket, float] = {}
    targets: dict[Bucket, float] = {}
    for bucket, nhe in counts.items():
        params = state.buckets[bucket]
        target = params.hwe_target if params.hwe_target is not None else float(nhe.mean())
        targets[bucket] = target
        lam = lagrange_multiplier(float(nhe.mean()), target, float(nhe.var()), cfg.lagrange_eps) if shaping_on else 0.0
        lambdas[bucket] = lam
        params.multiplier = lam
    for group in groups:
        bucket = group.bucket
        group.rewards = [
            _shape(traj.accuracy, profile.hwe_count, targets[bucket], bucket, lambdas[bucket], cfg.reward_mode)
            for traj, profile in zip(group.members, group.profiles)
        ]


def _shape(accuracy: int, n_he: int, target: float, bucket: Bucket, lam: float, mode: str) -> ShapedReward:
    return hierarchical_reward(accuracy, deviation(n_he, target), bucket, lam, mode, n_he=n_he, target=target)


def _update_items(
    state: TrainState, groups: Sequence[RolloutGroup], tau: float, mode: Mode
) -> tuple[list[UpdateItem], list[tuple[Bucket, KlReport]]]:
    cfg = state.config
    items: list[UpdateItem] = []
    reports: list[tuple[Bucket, KlReport]] = []
    for group in groups:
        bucket = group.bucket
        params = state.buckets[bucket]
        members = group.members
        totals = [r.total for r in group.rewards]
        if mode is Mode.AEPO:
            base = group_centered_token_advantage(totals, [t.length for t in members])
            if cfg.entropy_shaping:
                psi = token_entropy_bonus(group.profiles, tau, params.multiplier)
            else:
                psi = [np.zeros(t.length) for t in members]
        else:
            adv = grpo_advantage(totals, cfg.adv_eps)
            base = [np.full(t.length, a) for t, a in zip(members, adv)]
            psi = [np.zeros(t.length) for t in members]
        for traj, profile, a, s in zip(members, group.profiles, base, psi):
            advantages = AdvantageSet(group_advantage=a, shaping=s)
            if mode is Mode.AEPO:
                rho = cfg.kl_relax if cfg.dynamic_kl else 1.0
                weights = kl_weights(profile.trigger_mask, params.kl_base, rho)
                coef = params.kl_dual
            elif mode is Mode.GRPO:
                weights = np.full(traj.length, cfg.kl_beta_grpo)
                coef = 1.0
            else:
                weights = np.full(traj.length, cfg.kl_beta_grpo)
                coef = 0.0
            items.append(UpdateItem(traj, advantages.shaped, weights, coef))
            report = KlReport(kld=np.zeros(traj.length), weights=weights, control_mask=~profile.trigger_mask)
            reports.append((bucket, report))
    return items, reports


def train_step(
    state: TrainState,
    prompts: Optional[Sequence[TaskInstance]] = None,
    pool: Optional[Executor] = None,
    sink: Optional[Callable[[int, list[RolloutGroup]], None]] = None,
) -> MetricRecord:
    """One outer iteration. Mutates ``state`` and returns the iteration's metrics.

    Warm-up iterations run the GRPO update whatever the mode. The first training iteration
    freezes the warmed-up policy as the KL reference and restarts the per-bucket state.

    ``sink`` receives the scored groups (before filtering) for trajectory dumps.
    """
    cfg = state.config
    warming_up = state.warming_up
    mode = Mode.GRPO if warming_up else Mode(cfg.mode)
    policy = state.policy
    it = state.iteration
    if cfg.warmup_iterations and it == cfg.warmup_iterations:
        policy.freeze_reference()
        state.buckets = _fresh_buckets(cfg)
        logger.info(f"Iteration {it}: warm-up done, reference frozen")
    if prompts is None:
        prompts = sample_prompts(cfg, it)
    if not prompts:
        raise ValueError("train_step needs at least one prompt")
    vocab = state.vocab

    policy.refresh_old()

    def rollout_group(j: int) -> list[Trajectory]:
        return [
            sample_rollout(
                policy,
                prompts[j],
                cfg.max_len,
                cfg.temperature,
                cfg.top_p,
                derive_seed(cfg.seed, ROLLOUT_STREAM, it, j, i),
            )
            for i in range(cfg.group_size)
        ]

    primaries = _map(rollout_group, range(len(prompts)), pool)
    tau = batch_threshold([t.entropies for trajs in primaries for t in trajs], cfg.quantile)

    primary_profiles = [[hwe_detect(t, tau, cfg.window_size, vocab, "window") for t in trajs] for trajs in primaries]

    def branch_group(j: int) -> list[Trajectory]:
        if mode is not Mode.AEPO or cfg.branches_per_trigger == 0 or cfg.max_triggers == 0:
            return []
        out: list[Trajectory] = []
        for traj, profile in zip(primaries[j], primary_profiles[j]):
            steps = trigger_steps(profile, cfg.max_triggers)
            out.extend(branch_rollouts(policy, traj, steps, cfg.branches_per_trigger))
        return out

    branches = _map(branch_group, range(len(prompts)), pool)
    n_branches = sum(len(b) for b in branches)

    groups = []
    for j, task in enumerate(prompts):
        joined = branches[j] if cfg.branches_join_group else []
        profiles = primary_profiles[j] + [hwe_detect(t, tau, cfg.window_size, vocab, "window") for t in joined]
        groups.append(RolloutGroup(j, task, primaries[j], joined, profiles))

    shaping_on = mode is Mode.AEPO and cfg.entropy_shaping
    _score_groups(state, groups, shaping_on)
    state.buckets = update_bucket_targets(state.buckets, groups)
    if sink is not None:
        sink(it, groups)
    kept = online_filter(groups, cfg.filter_lo, cfg.filter_hi)
    filtered_fraction = 1.0 - len(kept) / len(groups)

    loss: Optional[float] = None
    clip_fraction: Optional[float] = None
    kl_ctrl: dict[Bucket, Optional[float]] = {b: None for b in Bucket}
    if kept:
        items, reports = _update_items(state, kept, tau, mode)
        aggregation = "token" if mode is Mode.DAPO else "sequence"
        # GRPO clips symmetrically
        clip_high = cfg.clip_low if mode is Mode.GRPO else cfg.clip_high
        learning_rate = cfg.learning_rate_aepo if mode is Mode.AEPO else cfg.learning_rate
        clip_fractions = []
        for u in range(cfg.updates_per_iteration):
            result = surrogate_loss(policy, items, cfg.clip_low, clip_high, aggregation)
            if u == 0:
                loss = result.loss
            clip_fractions.append(result.clip_fraction)
            policy.apply_gradient(result.gradient, learning_rate)
        clip_fraction = float(np.mean(clip_fractions))
        kl_ctrl = _control_kl(policy, items, reports)
        if mode is Mode.AEPO and cfg.dynamic_kl:
            for bucket, value in kl_ctrl.items():
                if value is None:
                    continue
                params = state.buckets[bucket]
                params.kl_dual = kl_controller_update(
                    params.kl_dual,
                    value,
                    params.kl_budget,
                    cfg.kappa_lr,
                    state.buckets.kappa_min,
                    state.buckets.kappa_max,
                )
    else:
        logger.warning(f"Iteration {it}: all {len(groups)} groups filtered out, skipping update")

    stage = "warmup" if warming_up else "train"
    record = _metrics(state, groups, tau, filtered_fraction, loss, clip_fraction, kl_ctrl, not kept, n_branches, stage)
    state.iteration += 1
    logger.info(
        f"iter {it} [{stage} {mode.value}] acc={record.accuracy_mean:.3f} len={record.length_mean:.2f} "
        f"nhe={record.nhe_mean:.2f} kept={len(kept)}/{len(groups)}"
    )
    return record


def _control_kl(
    policy: PolicyTable, items: Sequence[UpdateItem], reports: Sequence[tuple[Bucket, KlReport]]
) -> dict[Bucket, Optional[float]]:
    """Mean post-update KL over tokens outside high-entropy windows, pooled per bucket."""
    pooled: dict[Bucket, list[np.ndarray]] = {b: [] for b in Bucket}
    for item, (bucket, report) in zip(items, reports):
        report.kld = token_kl(policy, item.trajectory)
        if report.control_mask.any():
            pooled[bucket].append(report.kld[report.control_mask])
    return {b: float(np.concatenate(v).mean()) if v else None for b, v in pooled.items()}


def _metrics(
    state: TrainState,
    groups: Sequence[RolloutGroup],
    tau: float,
    filtered_fraction: float,
    loss: Optional[float],
    clip_fraction: Optional[float],
    kl_ctrl: dict[Bucket, Optional[float]],
    skipped: bool,
    n_branches: int,
    stage: str,
) -> MetricRecord:
    per_bucket: dict[str, dict[str, Any]] = {}
    for bucket in Bucket:
        in_bucket = [g for g in groups if g.bucket is bucket]
        trajs = [t for g in in_bucket for t in g.trajectories]
        nhe = [p.hwe_count for g in in_bucket for p in g.profiles[: g.group_size]]
        params = state.buckets[bucket]
        per_bucket[bucket.value] = {
            "n_prompts": len(in_bucket),
            "accuracy_mean": _mean_or_none([t.accuracy for t in trajs]),
            "length_mean": _mean_or_none([t.length for t in trajs]),
            "nhe_mean": _mean_or_none(nhe),
            "kl_ctrl": kl_ctrl[bucket],
            "kappa": params.kl_dual,
            "lambda": params.multiplier,
            "hwe_target": params.hwe_target,
        }
    trajs = [t for g in groups for t in g.trajectories]
    return MetricRecord(
        iteration=state.iteration,
        mode=state.config.mode,
        stage=stage,
        accuracy_mean=float(np.mean([t.accuracy for t in trajs])),
        length_mean=float(np.mean([t.length for t in trajs])),
        nhe_mean=float(np.mean([p.hwe_count for g in groups for p in g.profiles[: g.group_size]])),
        filtered_fraction=filtered_fraction,
        tau_high=tau,
        loss=loss,
        clip_fraction=clip_fraction,
        skipped=skipped,
        n_groups=len(groups),
        n_trajectories=len(trajs),
        n_branches=n_branches,
        fallback_count=sum(t.fallback_count for g in groups for t in g.members),
        buckets=per_bucket,
    )

