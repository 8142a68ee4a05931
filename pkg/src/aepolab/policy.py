"""
Tabular-softmax autoregressive policy and a family of verifiable arithmetic-chain tasks.

The policy keeps one logit row per k-gram context. Rows are created lazily: an unseen
context reads as the zero row (uniform distribution) and is only materialized when a
gradient step writes to it, so sampling never mutates the table and can run from many
workers at once.
"""

import json
import logging
import math
import os
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from scipy.special import softmax

from .entropy import token_entropy
from .seeding import BRANCH_STREAM, derive_seed, rng_for

__all__ = [
    "Context",
    "GradientTable",
    "PolicyTable",
    "TaskFamily",
    "TaskInstance",
    "Trajectory",
    "branch_rollouts",
    "draw_token",
    "enumerate_responses",
    "exact_policy_gradient",
    "make_task",
    "read_trajectories",
    "sample_rollout",
    "sampling_distribution",
    "write_trajectories",
]

logger = logging.getLogger(__name__)

Context = tuple[int, ...]
GradientTable = dict[Context, np.ndarray]

PAD = -1


@dataclass(frozen=True)
class TaskFamily:
    """Vocabulary layout shared by tasks and policy.

    Ids ``0..modulus-1`` are digits, the next ``n_connectives`` ids are connective
    (reasoning) tokens, and the last id is STOP.
    """

    vocab_size: int = 12
    n_connectives: int = 3

    def __post_init__(self) -> None:
        if self.n_connectives < 1:
            raise ValueError(f"Need at least one connective token, got {self.n_connectives}")
        if self.modulus < 2:
            raise ValueError(
                f"vocab_size={self.vocab_size} leaves fewer than 2 digits with {self.n_connectives} connectives"
            )

    @property
    def modulus(self) -> int:
        return self.vocab_size - self.n_connectives - 1

    @property
    def stop_token(self) -> int:
        return self.vocab_size - 1

    @property
    def connectives(self) -> tuple[int, ...]:
        return tuple(range(self.modulus, self.modulus + self.n_connectives))

    def is_digit(self, token: int) -> bool:
        return 0 <= token < self.modulus

    @property
    def units(self) -> tuple[int, ...]:
        return tuple(c for c in range(1, self.modulus) if math.gcd(c, self.modulus) == 1)


DEFAULT_FAMILY = TaskFamily()


@dataclass(frozen=True)
class TaskInstance:
    prompt: tuple[int, ...]
    gold_answer: tuple[int, ...]
    difficulty_knob: int
    seed: int
    family: TaskFamily = DEFAULT_FAMILY

    def answer_of(self, response: Sequence[int]) -> Optional[tuple[int, ...]]:
        """The maximal run of digits right before the first STOP, or None without a STOP."""
        stop = self.family.stop_token
        try:
            end = list(response).index(stop)
        except ValueError:
            return None
        start = end
        while start > 0 and self.family.is_digit(response[start - 1]):
            start -= 1
        return tuple(response[start:end])

    def verify(self, sequence: Sequence[int]) -> bool:
        """Check a full ``prompt ++ response`` sequence."""
        n = len(self.prompt)
        if tuple(sequence[:n]) != self.prompt:
            raise ValueError("Sequence does not start with the task prompt")
        return self.answer_of(sequence[n:]) == self.gold_answer

    def score(self, response: Sequence[int]) -> int:
        return int(self.answer_of(response) == self.gold_answer)


def make_task(difficulty_knob: int, seed: int, family: TaskFamily = DEFAULT_FAMILY) -> TaskInstance:
    """Additive chain modulo M.

    The prompt shows two consecutive chain values ``(x0, x1)`` with step ``c``; the answer
    continues the chain for ``difficulty_knob`` values, the last of which is 0.
    """
    if difficulty_knob < 1:
        raise ValueError(f"difficulty_knob must be positive, got {difficulty_knob}")
    m = family.modulus
    rng = rng_for(seed)
    c = int(rng.choice(family.units))
    x1 = (-difficulty_knob * c) % m
    x0 = (x1 - c) % m
    gold = tuple((x1 + j * c) % m for j in range(1, difficulty_knob + 1))
    return TaskInstance(prompt=(x0, x1), gold_answer=gold, difficulty_knob=difficulty_knob, seed=seed, family=family)


def _table_to_json(table: dict[Context, np.ndarray]) -> dict[str, list[float]]:
    return {",".join(str(t) for t in ctx): row.tolist() for ctx, row in table.items()}


def _table_from_json(data: dict[str, list[float]]) -> dict[Context, np.ndarray]:
    return {tuple(int(t) for t in key.split(",")): np.asarray(row, dtype=float) for key, row in data.items()}


def _copy_table(table: dict[Context, np.ndarray]) -> dict[Context, np.ndarray]:
    return {ctx: row.copy() for ctx, row in table.items()}


class PolicyTable:
    """Softmax policy over exact k-gram contexts.

    ``reference_weights`` is frozen at stage start and ``old_weights`` is refreshed at
    each outer iteration; gradient steps only ever touch ``weights``.
    """

    def __init__(self, vocab_size: int = 12, context_order: int = 2) -> None:
        if vocab_size < 2:
            raise ValueError(f"vocab_size must be at least 2, got {vocab_size}")
        if context_order < 1:
            raise ValueError(f"context_order must be positive, got {context_order}")
        self.vocab_size = vocab_size
        self.context_order = context_order
        self.weights: dict[Context, np.ndarray] = {}
        self.reference_weights: dict[Context, np.ndarray] = {}
        self.old_weights: dict[Context, np.ndarray] = {}

    def context_of(self, sequence: Sequence[int]) -> Context:
        tail = tuple(sequence[-self.context_order :]) if sequence else ()
        return (PAD,) * (self.context_order - len(tail)) + tail

    def _row(self, table: dict[Context, np.ndarray], ctx: Context) -> np.ndarray:
        row = table.get(ctx)
        return row if row is not None else np.zeros(self.vocab_size)

    def logits(self, ctx: Context) -> np.ndarray:
        return self._row(self.weights, ctx)

    def old_logits(self, ctx: Context) -> np.ndarray:
        return self._row(self.old_weights, ctx)

    def ref_logits(self, ctx: Context) -> np.ndarray:
        return self._row(self.reference_weights, ctx)

    def probs(self, ctx: Context) -> np.ndarray:
        return softmax(self._row(self.weights, ctx))

    def ref_probs(self, ctx: Context) -> np.ndarray:
        return softmax(self._row(self.reference_weights, ctx))

    def old_probs(self, ctx: Context) -> np.ndarray:
        return softmax(self._row(self.old_weights, ctx))

    def set_row(self, ctx: Context, logits: Sequence[float]) -> None:
        row = np.asarray(logits, dtype=float)
        if row.shape != (self.vocab_size,):
            raise ValueError(f"Row must have {self.vocab_size} entries, got shape {row.shape}")
        self.weights[ctx] = row.copy()

    def ensure_row(self, ctx: Context) -> np.ndarray:
        row = self.weights.get(ctx)
        if row is None:
            row = self.weights[ctx] = np.zeros(self.vocab_size)
        return row

    def apply_gradient(self, gradient: GradientTable, lr: float) -> None:
        """Descent step ``weights -= lr * gradient``. Single writer only."""
        for ctx, g in gradient.items():
            row = self.ensure_row(ctx)
            row -= lr * g

    def refresh_old(self) -> None:
        self.old_weights = _copy_table(self.weights)

    def freeze_reference(self) -> None:
        self.reference_weights = _copy_table(self.weights)

    def copy(self) -> "PolicyTable":
        other = PolicyTable(self.vocab_size, self.context_order)
        other.weights = _copy_table(self.weights)
        other.reference_weights = _copy_table(self.reference_weights)
        other.old_weights = _copy_table(self.old_weights)
        return other

    def to_dict(self) -> dict[str, Any]:
        return {
            "vocab_size": self.vocab_size,
            "context_order": self.context_order,
            "weights": _table_to_json(self.weights),
            "reference_weights": _table_to_json(self.reference_weights),
            "old_weights": _table_to_json(self.old_weights),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PolicyTable":
        policy = cls(int(data["vocab_size"]), int(data["context_order"]))
        policy.weights = _table_from_json(data["weights"])
        policy.reference_weights = _table_from_json(data["reference_weights"])
        policy.old_weights = _table_from_json(data["old_weights"])
        return policy

    def __repr__(self) -> str:
        return (
            f"{type(self).__name__}(vocab_size={self.vocab_size}, context_order={self.context_order}, "
            f"rows={len(self.weights)})"
        )


@dataclass
class Trajectory:
    """One sampled response.

    ``step_distributions`` are the temperature-scaled, top-p renormalized distributions
    the tokens were drawn from; ``logprobs`` and ``entropies`` are measured on them.
    Records read back from JSONL carry no distributions (zero rows).
    """

    task: TaskInstance
    tokens: list[int]
    step_distributions: np.ndarray
    logprobs: np.ndarray
    entropies: np.ndarray
    accuracy: int
    seed: int
    temperature: float
    top_p: float
    max_len: int
    fallback_count: int = 0
    branch_step: Optional[int] = None
    contexts: list[Context] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def prompt(self) -> tuple[int, ...]:
        return self.task.prompt

    def check_contexts(self) -> None:
        """Raise unless every token has its sampling context, which records read from JSONL lack."""
        if len(self.contexts) != self.length:
            raise ValueError(f"Trajectory has {len(self.contexts)} contexts for {self.length} tokens")

    def to_record(self) -> dict[str, Any]:
        return {
            "prompt": list(self.task.prompt),
            "tokens": list(self.tokens),
            "logprobs": self.logprobs.tolist(),
            "entropies": self.entropies.tolist(),
            "accuracy": self.accuracy,
            "seed": self.seed,
            "gold_answer": list(self.task.gold_answer),
            "difficulty_knob": self.task.difficulty_knob,
            "task_seed": self.task.seed,
            "vocab_size": self.task.family.vocab_size,
            "n_connectives": self.task.family.n_connectives,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_len": self.max_len,
            "branch_step": self.branch_step,
        }


def sampling_distribution(
    policy: PolicyTable, ctx: Context, temperature: float, top_p: float
) -> tuple[np.ndarray, bool]:
    """Temperature-scaled softmax, then nearest-mass top-p renormalization.

    Returns the distribution and whether the argmax fallback was taken.
    """
    p = softmax(policy.logits(ctx) / temperature)
    order = np.argsort(-p, kind="stable")
    csum = np.cumsum(p[order])
    n_keep = min(int(np.searchsorted(csum, top_p, side="left")) + 1, p.size)
    keep = order[:n_keep]
    mass = float(p[keep].sum())
    dist = np.zeros_like(p)
    if not math.isfinite(mass) or mass <= 0.0:
        dist[int(np.argmax(np.nan_to_num(p, nan=-1.0)))] = 1.0
        return dist, True
    dist[keep] = p[keep] / mass
    return dist, False


def draw_token(dist: np.ndarray, rng: np.random.Generator) -> int:
    return int(rng.choice(dist.size, p=dist))


def _extend(
    policy: PolicyTable,
    task: TaskInstance,
    prefix: Sequence[int],
    prefix_distributions: Sequence[np.ndarray],
    rng: np.random.Generator,
    max_len: int,
    temperature: float,
    top_p: float,
    seed: int,
    branch_step: Optional[int] = None,
) -> Trajectory:
    stop = task.family.stop_token
    tokens = list(prefix)
    dists = [d.copy() for d in prefix_distributions]
    contexts = [policy.context_of(task.prompt + tuple(tokens[:t])) for t in range(len(tokens))]
    fallbacks = 0
    while len(tokens) < max_len and (not tokens or tokens[-1] != stop):
        ctx = policy.context_of(task.prompt + tuple(tokens))
        dist, fell_back = sampling_distribution(policy, ctx, temperature, top_p)
        if fell_back:
            fallbacks += 1
            logger.warning(f"top_p={top_p} kept no mass at context {ctx}; using argmax token")
        contexts.append(ctx)
        dists.append(dist)
        tokens.append(draw_token(dist, rng))
    distributions = np.asarray(dists, dtype=float).reshape(len(tokens), policy.vocab_size)
    picked = distributions[np.arange(len(tokens)), tokens] if tokens else np.zeros(0)
    return Trajectory(
        task=task,
        tokens=tokens,
        step_distributions=distributions,
        logprobs=np.log(picked),
        entropies=np.array([token_entropy(d) for d in distributions]),
        accuracy=task.score(tokens),
        seed=seed,
        temperature=temperature,
        top_p=top_p,
        max_len=max_len,
        fallback_count=fallbacks,
        branch_step=branch_step,
        contexts=contexts,
    )


def _check_compatible(policy: PolicyTable, task: TaskInstance) -> None:
    if policy.vocab_size != task.family.vocab_size:
        raise ValueError(f"Policy vocab {policy.vocab_size} does not match task vocab {task.family.vocab_size}")


def sample_rollout(
    policy: PolicyTable,
    task: TaskInstance,
    max_len: int,
    temperature: float = 1.0,
    top_p: float = 1.0,
    seed: int = 0,
) -> Trajectory:
    """Sample one response until the first STOP or ``max_len`` tokens. Deterministic given seed."""
    if max_len < 1:
        raise ValueError(f"max_len must be positive, got {max_len}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not 0.0 < top_p <= 1.0:
        raise ValueError(f"top_p must lie in (0, 1], got {top_p}")
    _check_compatible(policy, task)
    return _extend(policy, task, (), (), rng_for(seed), max_len, temperature, top_p, seed)


def branch_rollouts(
    policy: PolicyTable,
    trajectory: Trajectory,
    trigger_steps: Iterable[int],
    branches_per_trigger: int,
) -> list[Trajectory]:
    """Resample from each trigger step, keeping the parent's prefix ``o_{<t}`` exactly."""
    steps = list(trigger_steps)
    for t in steps:
        if not 0 <= t < trajectory.length:
            raise ValueError(f"Trigger step {t} outside trajectory of length {trajectory.length}")
    branches = []
    for t in steps:
        for b in range(branches_per_trigger):
            seed = derive_seed(trajectory.seed, BRANCH_STREAM, t, b)
            branches.append(
                _extend(
                    policy,
                    trajectory.task,
                    trajectory.tokens[:t],
                    list(trajectory.step_distributions[:t]),
                    rng_for(seed),
                    trajectory.max_len,
                    trajectory.temperature,
                    trajectory.top_p,
                    seed,
                    branch_step=t,
                )
            )
    return branches


def exact_policy_gradient(
    policy: PolicyTable, trajectory: Trajectory, token_advantages: Sequence[float]
) -> GradientTable:
    """sum_t A_t * grad log pi(o_t | s_t) for the unscaled softmax.

    Only rows of visited contexts appear in the result.
    """
    adv = np.asarray(token_advantages, dtype=float)
    if adv.shape != (trajectory.length,):
        raise ValueError(f"Expected {trajectory.length} advantages, got shape {adv.shape}")
    trajectory.check_contexts()
    grad: GradientTable = {}
    for ctx, token, a in zip(trajectory.contexts, trajectory.tokens, adv):
        g = -a * policy.probs(ctx)
        g[token] += a
        if ctx in grad:
            grad[ctx] += g
        else:
            grad[ctx] = g
    return grad


def enumerate_responses(
    policy: PolicyTable, task: TaskInstance, max_len: int, temperature: float = 1.0, top_p: float = 1.0
) -> Iterator[tuple[tuple[int, ...], float]]:
    """Every reachable response with its exact sampling probability."""
    _check_compatible(policy, task)
    stop = task.family.stop_token

    def walk(tokens: tuple[int, ...], prob: float) -> Iterator[tuple[tuple[int, ...], float]]:
        if len(tokens) == max_len or (tokens and tokens[-1] == stop):
            yield tokens, prob
            return
        dist, _ = sampling_distribution(policy, policy.context_of(task.prompt + tokens), temperature, top_p)
        for token in np.flatnonzero(dist):
            yield from walk(tokens + (int(token),), prob * float(dist[token]))

    yield from walk((), 1.0)


def trajectory_from_record(record: dict[str, Any]) -> Trajectory:
    family = TaskFamily(int(record.get("vocab_size", 12)), int(record.get("n_connectives", 3)))
    task = TaskInstance(
        prompt=tuple(record["prompt"]),
        gold_answer=tuple(record.get("gold_answer", ())),
        difficulty_knob=int(record.get("difficulty_knob", 1)),
        seed=int(record.get("task_seed", 0)),
        family=family,
    )
    tokens = [int(t) for t in record["tokens"]]
    return Trajectory(
        task=task,
        tokens=tokens,
        step_distributions=np.zeros((0, family.vocab_size)),
        logprobs=np.asarray(record["logprobs"], dtype=float),
        entropies=np.asarray(record["entropies"], dtype=float),
        accuracy=int(record["accuracy"]),
        seed=int(record["seed"]),
        temperature=float(record.get("temperature", 1.0)),
        top_p=float(record.get("top_p", 1.0)),
        max_len=int(record.get("max_len", len(tokens))),
        branch_step=record.get("branch_step"),
    )


def write_trajectories(path: str, trajectories: Iterable[Trajectory], append: bool = False) -> int:
    dir_name = os.path.dirname(path)
    if dir_name:
        os.makedirs(dir_name, exist_ok=True)
    count = 0
    with open(path, "a" if append else "w") as f:
        for trajectory in trajectories:
            f.write(json.dumps(trajectory.to_record(), sort_keys=True) + "\n")
            count += 1
    return count


def read_trajectories(path: str) -> list[Trajectory]:
    with open(path) as f:
        return [trajectory_from_record(json.loads(line)) for line in f if line.strip()]
