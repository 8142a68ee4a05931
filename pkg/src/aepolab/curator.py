"""
Cold-start data curation by pass-rate-aware target lengths.

Each source gets two anchors, the median response lengths of its problems at pass rate
0 and at pass rate 1. A problem with pass rate ``p`` then targets the linear
interpolation between them, and the curator keeps the candidate response closest to
that target while drawing the same number of problems from every pass-rate bracket.
"""

import csv
import json
import logging
import math
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .seeding import SUBSAMPLE_STREAM, derive_seed, rng_for

__all__ = [
    "CuratedCorpus",
    "CuratedEntry",
    "Problem",
    "Response",
    "SUMMARY_CSV_HEADER",
    "bracket_of",
    "length_anchors",
    "read_corpus",
    "select_responses",
    "target_length",
    "write_bracket_summary",
    "write_curated",
]

logger = logging.getLogger(__name__)

SUMMARY_CSV_HEADER = ["bracket", "count", "mean_chosen_length", "mean_target"]


@dataclass(frozen=True)
class Response:
    response_id: str
    length: int


@dataclass(frozen=True)
class Problem:
    problem_id: str
    source: str
    pass_rate: float
    responses: tuple[Response, ...]

    def __post_init__(self) -> None:
        if not 0.0 <= self.pass_rate <= 1.0:
            raise ValueError(f"Problem {self.problem_id}: pass_rate must lie in [0, 1], got {self.pass_rate}")

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> "Problem":
        return cls(
            problem_id=str(record["problem_id"]),
            source=str(record["source"]),
            pass_rate=float(record["pass_rate"]),
            responses=tuple(Response(str(r["response_id"]), int(r["text_len"])) for r in record["responses"]),
        )


@dataclass(frozen=True)
class CuratedEntry:
    problem_id: str
    source: str
    pass_rate: float
    bracket: int
    target_length: float
    response_id: str
    length: int

    def to_record(self) -> dict[str, Any]:
        return {
            "problem_id": self.problem_id,
            "source": self.source,
            "pass_rate": self.pass_rate,
            "bracket": self.bracket,
            "target_length": self.target_length,
            "response_id": self.response_id,
            "text_len": self.length,
        }


@dataclass
class CuratedCorpus:
    entries: list[CuratedEntry]
    brackets: int
    anchors: dict[str, tuple[int, int]] = field(default_factory=dict)
    rejected_sources: dict[str, str] = field(default_factory=dict)
    empty_brackets: list[int] = field(default_factory=list)

    def bracket_counts(self) -> list[int]:
        counts = [0] * self.brackets
        for entry in self.entries:
            counts[entry.bracket] += 1
        return counts


def _lower_median(values: Sequence[int]) -> int:
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def length_anchors(problems: Iterable[Problem]) -> tuple[dict[str, tuple[int, int]], dict[str, str]]:
    """Per-source (L(0), L(1)) and the sources rejected for lacking an extreme or a positive anchor."""
    at_zero: dict[str, list[int]] = {}
    at_one: dict[str, list[int]] = {}
    sources: set[str] = set()
    for problem in problems:
        sources.add(problem.source)
        lengths = [r.length for r in problem.responses]
        if problem.pass_rate == 0.0:
            at_zero.setdefault(problem.source, []).extend(lengths)
        elif problem.pass_rate == 1.0:
            at_one.setdefault(problem.source, []).extend(lengths)
    anchors: dict[str, tuple[int, int]] = {}
    rejected: dict[str, str] = {}
    for source in sorted(sources):
        missing = [name for name, pool in (("pass rate 0", at_zero), ("pass rate 1", at_one)) if not pool.get(source)]
        if missing:
            rejected[source] = f"no responses at {' or '.join(missing)}"
            logger.warning(f"Rejecting source {source!r}: {rejected[source]}")
            continue
        l0, l1 = _lower_median(at_zero[source]), _lower_median(at_one[source])
        if l0 <= 0 or l1 <= 0:
            rejected[source] = f"non-positive anchor lengths L0={l0}, L1={l1}"
            logger.warning(f"Rejecting source {source!r}: {rejected[source]}")
            continue
        anchors[source] = (l0, l1)
    return anchors, rejected


def target_length(p: float, l0: float, l1: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"Pass rate must lie in [0, 1], got {p}")
    if l0 <= 0 or l1 <= 0:
        raise ValueError(f"Anchor lengths must be positive, got L0={l0}, L1={l1}")
    return (1.0 - p) * l0 + p * l1


def bracket_of(p: float, brackets: int) -> int:
    return min(math.floor(p * brackets), brackets - 1)


def _closest(responses: Sequence[Response], target: float) -> Response:
    return min(responses, key=lambda r: (abs(r.length - target), r.length, r.response_id))


def select_responses(
    problems: Sequence[Problem], brackets: int = 9, per_bracket_quota: Optional[int] = None, seed: int = 0
) -> CuratedCorpus:
    """Pick one length-matched response per selected problem, equally many per bracket.

    Every nonempty bracket contributes ``min(quota, smallest nonempty bracket)`` problems,
    drawn by a seeded subsample; empty brackets are reported.
    """
    if brackets < 2:
        raise ValueError(f"Need at least 2 brackets, got {brackets}")
    if per_bracket_quota is not None and per_bracket_quota < 0:
        raise ValueError(f"Quota must be nonnegative, got {per_bracket_quota}")
    anchors, rejected = length_anchors(problems)
    by_bracket: list[list[Problem]] = [[] for _ in range(brackets)]
    for problem in problems:
        if problem.source not in anchors:
            continue
        if not problem.responses:
            logger.warning(f"Problem {problem.problem_id} has no responses, skipping")
            continue
        by_bracket[bracket_of(problem.pass_rate, brackets)].append(problem)

    empty = [b for b, members in enumerate(by_bracket) if not members]
    for b in empty:
        logger.warning(f"Bracket {b} is empty, its quota stays unfilled")
    sizes = [len(members) for members in by_bracket if members]
    quota = min(sizes) if sizes else 0
    if per_bracket_quota is not None:
        quota = min(quota, per_bracket_quota)

    entries: list[CuratedEntry] = []
    for b, members in enumerate(by_bracket):
        if not members:
            continue
        members = sorted(members, key=lambda x: (x.source, x.problem_id))
        picked = rng_for(derive_seed(seed, SUBSAMPLE_STREAM, b)).choice(len(members), size=quota, replace=False)
        for i in sorted(int(i) for i in picked):
            problem = members[i]
            l0, l1 = anchors[problem.source]
            target = target_length(problem.pass_rate, l0, l1)
            chosen = _closest(problem.responses, target)
            entries.append(
                CuratedEntry(
                    problem.problem_id, problem.source, problem.pass_rate, b, target, chosen.response_id, chosen.length
                )
            )
    logger.info(f"Curated {len(entries)} problems across {brackets - len(empty)} brackets, {quota} per bracket")
    return CuratedCorpus(entries, brackets, anchors, rejected, empty)


def read_corpus(path: str) -> list[Problem]:
    with open(path) as f:
        return [Problem.from_record(json.loads(line)) for line in f if line.strip()]


def _ensure_parent(path: str) -> None:
    dir_name = os.path.dirname(path)
    if dir_name:
        os.makedirs(dir_name, exist_ok=True)


def write_curated(path: str, corpus: CuratedCorpus) -> None:
    _ensure_parent(path)
    with open(path, "w") as f:
        for entry in corpus.entries:
            f.write(json.dumps(entry.to_record(), sort_keys=True) + "\n")


def write_bracket_summary(path: str, corpus: CuratedCorpus) -> None:
    _ensure_parent(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SUMMARY_CSV_HEADER)
        for b in range(corpus.brackets):
            chosen = [e for e in corpus.entries if e.bracket == b]
            if chosen:
                mean_len = float(np.mean([e.length for e in chosen]))
                mean_target = float(np.mean([e.target_length for e in chosen]))
                writer.writerow([b, len(chosen), mean_len, mean_target])
            else:
                writer.writerow([b, 0, "", ""])
