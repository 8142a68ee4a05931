"""
Numerical checks of the variance, renewal-length and KL-budget results the training
method rests on.

Monte Carlo checks state their standard errors next to their estimates; finite-alphabet
bounds are evaluated exactly with numerically stable primitives (``rel_entr``,
``logsumexp``).
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np
from scipy.special import logsumexp, rel_entr, softmax
from scipy.stats import linregress

from .seeding import derive_seed, rng_for

__all__ = [
    "CheckReport",
    "TwoStateProcess",
    "RenewalSamples",
    "budget_bounds_check",
    "expected_length",
    "group_variance_check",
    "hazard_dominance_check",
    "kl_penalty_inflation_check",
    "renewal_linearity_check",
    "renewal_simulate",
    "run_all_checks",
    "tilt_optimality_check",
]

logger = logging.getLogger(__name__)

MIN_TRIALS = 10_000
DV_ETAS = np.logspace(-3, 3, 32)
SLACK = 1e-9

RewardSampler = Callable[[np.random.Generator, int, int], np.ndarray]
PairSampler = Callable[[np.random.Generator, int, int], tuple[np.ndarray, np.ndarray]]
Hazard = Callable[[np.ndarray], np.ndarray]


@dataclass
class CheckReport:
    name: str
    passed: bool
    estimates: dict[str, Any] = field(default_factory=dict)
    tolerances: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "passed": self.passed, "estimates": self.estimates, "tolerances": self.tolerances}


def bernoulli_rewards(p: float) -> RewardSampler:
    def sample(rng: np.random.Generator, trials: int, n: int) -> np.ndarray:
        return (rng.random((trials, n)) < p).astype(float)

    return sample


def correlated_pair(sigma_s: float, sigma_k: float, corr: float, mean_k: float = 0.0) -> PairSampler:
    """Jointly Gaussian (S, K) per group member, independent across members."""
    cov = np.array([[sigma_s**2, corr * sigma_s * sigma_k], [corr * sigma_s * sigma_k, sigma_k**2]])

    def sample(rng: np.random.Generator, trials: int, n: int) -> tuple[np.ndarray, np.ndarray]:
        draws = rng.multivariate_normal([0.0, mean_k], cov, size=(trials, n))
        return draws[..., 0], draws[..., 1]

    return sample


def _check_trials(trials: int) -> None:
    if trials < MIN_TRIALS:
        raise ValueError(f"Need at least {MIN_TRIALS} trials, got {trials}")


def _relative_error(estimate: float, expected: float) -> float:
    if expected == 0:
        return abs(estimate)
    return abs(estimate - expected) / abs(expected)


def group_variance_check(
    n: int, sampler: RewardSampler, trials: int, seed: int = 0, tolerance: float = 0.02
) -> CheckReport:
    """Var(R_i - mean R) against (1 - 1/N) Var(R)."""
    if n < 2:
        raise ValueError(f"Group size must be at least 2, got {n}")
    _check_trials(trials)
    rewards = sampler(rng_for(seed), trials, n)
    advantages = rewards - rewards.mean(axis=1, keepdims=True)
    var_r = float(rewards.var())
    var_a = float(advantages.var())
    expected = 1.0 - 1.0 / n
    if var_r == 0.0:
        ratio: Optional[float] = None
        passed = var_a == 0.0
        error = 0.0 if passed else math.inf
    else:
        ratio = var_a / var_r
        error = _relative_error(ratio, expected)
        passed = error <= tolerance
    return CheckReport(
        "group_variance",
        passed,
        {"n": n, "trials": trials, "var_reward": var_r, "var_advantage": var_a, "ratio": ratio, "expected": expected},
        {"relative_error": error, "tolerance": tolerance},
    )


def kl_penalty_inflation_check(
    n: int, kappa: float, sampler: PairSampler, trials: int, seed: int = 0, tolerance: float = 0.05
) -> CheckReport:
    """Var(A') - Var(A) for A' built from S - kappa K, against (1-1/N)(kappa^2 var K - 2 kappa cov(S, K))."""
    if n < 2:
        raise ValueError(f"Group size must be at least 2, got {n}")
    _check_trials(trials)
    s, k = sampler(rng_for(seed), trials, n)
    shaped = s - kappa * k
    a = s - s.mean(axis=1, keepdims=True)
    a_kl = shaped - shaped.mean(axis=1, keepdims=True)
    difference = float(a_kl.var() - a.var())
    var_k = float(k.var())
    cov_sk = float(np.mean((s - s.mean()) * (k - k.mean())))
    predicted = (1.0 - 1.0 / n) * (kappa**2 * var_k - 2.0 * kappa * cov_sk)
    if kappa == 0:
        error = abs(difference)
        passed = error <= SLACK
    else:
        error = _relative_error(difference, predicted)
        passed = error <= tolerance
    return CheckReport(
        "kl_penalty_inflation",
        passed,
        {
            "n": n,
            "kappa": kappa,
            "trials": trials,
            "difference": difference,
            "predicted": predicted,
            "var_k": var_k,
            "cov_sk": cov_sk,
        },
        {"relative_error": error, "tolerance": tolerance},
    )


@dataclass(frozen=True)
class TwoStateProcess:
    """Reasoning (R) / verbatim (V) chain; episodes start in V and stop only from V.

    ``q`` is the R -> V probability, ``h`` the stopping hazard in V, ``entry`` the V -> R
    probability when not stopping, and ``alpha``/``beta`` the detector miss and
    false-alarm rates.
    """

    q: float
    h: float
    entry: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self) -> None:
        if not 0 < self.q <= 1:
            raise ValueError(f"q must lie in (0, 1], got {self.q}")
        if not 0 < self.h <= 1:
            raise ValueError(f"h must lie in (0, 1], got {self.h}")
        if not 0 <= self.entry < 1:
            raise ValueError(f"entry must lie in [0, 1), got {self.entry}")
        if not (0 <= self.alpha < 1 and 0 <= self.beta < 1):
            raise ValueError(f"Detector error rates must lie in [0, 1), got alpha={self.alpha}, beta={self.beta}")


@dataclass
class RenewalSamples:
    lengths: np.ndarray
    reasoning_steps: np.ndarray
    nhe: np.ndarray


def expected_length(process: TwoStateProcess) -> float:
    return 1.0 / process.h + process.entry * (1.0 / process.h - 1.0) / process.q


def renewal_simulate(process: TwoStateProcess, episodes: int, seed: int = 0) -> RenewalSamples:
    if episodes < 1:
        raise ValueError(f"episodes must be positive, got {episodes}")
    rng = rng_for(seed)
    lengths = np.zeros(episodes, dtype=np.int64)
    reasoning = np.zeros(episodes, dtype=np.int64)
    nhe = np.zeros(episodes, dtype=np.int64)
    in_r = np.zeros(episodes, dtype=bool)
    alive = np.arange(episodes)
    while alive.size:
        r = in_r[alive]
        lengths[alive] += 1
        reasoning[alive] += r
        u = rng.random(alive.size)
        flagged = np.where(r, u >= process.alpha, u < process.beta)
        nhe[alive] += flagged
        move = rng.random(alive.size)
        stop = ~r & (move < process.h)
        # not stopping in V: enter R with probability ``entry``
        enter = ~r & ~stop & (rng.random(alive.size) < process.entry)
        leave = r & (move < process.q)
        in_r[alive] = (r & ~leave) | enter
        alive = alive[~stop]
    return RenewalSamples(lengths=lengths, reasoning_steps=reasoning, nhe=nhe)


def renewal_linearity_check(
    q: float = 0.2,
    h: float = 0.1,
    entries: Sequence[float] = tuple(np.linspace(0.0, 0.9, 8)),
    alpha: float = 0.1,
    beta: float = 0.05,
    episodes: int = 20_000,
    seed: int = 0,
    min_r2: float = 0.99,
) -> CheckReport:
    """Regress mean length on mean detected count across an entry-probability sweep."""
    if len(entries) < 3:
        raise ValueError(f"Need at least 3 settings for a regression, got {len(entries)}")
    mean_l, mean_nhe, se_l = [], [], []
    for i, e in enumerate(entries):
        samples = renewal_simulate(TwoStateProcess(q, h, float(e), alpha, beta), episodes, derive_seed(seed, i))
        mean_l.append(float(samples.lengths.mean()))
        se_l.append(float(samples.lengths.std() / math.sqrt(episodes)))
        mean_nhe.append(float(samples.nhe.mean()))
    fit = linregress(mean_nhe, mean_l)
    r2 = float(fit.rvalue**2)
    perfect = renewal_simulate(TwoStateProcess(q, h, float(entries[-1])), episodes, derive_seed(seed, len(entries)))
    perfect_ok = bool(np.array_equal(perfect.nhe, perfect.reasoning_steps))
    return CheckReport(
        "renewal_linearity",
        bool(r2 >= min_r2 and fit.slope > 0 and perfect_ok),
        {
            "entries": [float(e) for e in entries],
            "mean_length": mean_l,
            "length_standard_error": se_l,
            "expected_length": [expected_length(TwoStateProcess(q, h, float(e))) for e in entries],
            "mean_nhe": mean_nhe,
            "slope": float(fit.slope),
            "intercept": float(fit.intercept),
            "r2": r2,
            "perfect_detector_exact": perfect_ok,
        },
        {"min_r2": min_r2, "episodes": episodes},
    )


def _hazard_episodes(
    hazard: Hazard, path: np.ndarray, theta: float, episodes: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stop at step t with probability hazard(H_t); the path holds its last value past its end."""
    rates = np.asarray(hazard(path), dtype=float)
    if rates.shape != path.shape or np.any((rates <= 0) | (rates > 1)):
        raise ValueError("Hazard must map every path entry into (0, 1]")
    high = path >= theta
    lengths = np.zeros(episodes, dtype=np.int64)
    nhe = np.zeros(episodes, dtype=np.int64)
    stopped_high = np.zeros(episodes, dtype=bool)
    alive = np.arange(episodes)
    t = 0
    while alive.size:
        i = min(t, path.size - 1)
        lengths[alive] += 1
        nhe[alive] += high[i]
        stop = rng.random(alive.size) < rates[i]
        stopped_high[alive[stop]] = high[i]
        alive = alive[~stop]
        t += 1
    return lengths, nhe, stopped_high


def hazard_dominance_check(
    hazard: Hazard,
    path_low: Sequence[float],
    path_high: Sequence[float],
    theta: float,
    episodes: int = 100_000,
    seed: int = 0,
    n_se: float = 3.0,
) -> CheckReport:
    """A pointwise higher-entropy path, under a nonincreasing hazard, stops no earlier.

    The count bound is checked in the forms that hold per episode in discrete time,
    E[L] >= E[N_HE] and hazard(theta) E[N_HE] >= P(stop at a high-entropy step); the
    ratio form E[N_HE] / hazard(theta) is reported alongside for reference.
    """
    low = np.asarray(path_low, dtype=float)
    high = np.asarray(path_high, dtype=float)
    if low.shape != high.shape or low.size == 0:
        raise ValueError("Entropy paths must be nonempty and of equal length")
    if np.any(low > high):
        raise ValueError("path_low must lie pointwise below path_high")
    rate_theta = float(np.asarray(hazard(np.array([theta])), dtype=float)[0])
    estimates: dict[str, Any] = {"theta": theta, "hazard_theta": rate_theta, "episodes": episodes}
    passed = True
    means = {}
    for label, path, stream in (("low", low, 1), ("high", high, 2)):
        lengths, nhe, stopped_high = _hazard_episodes(hazard, path, theta, episodes, rng_for(derive_seed(seed, stream)))
        mean_l = float(lengths.mean())
        se_l = float(lengths.std() / math.sqrt(episodes))
        mean_nhe = float(nhe.mean())
        p_stop_high = float(stopped_high.mean())
        se_bound = float(np.std(rate_theta * nhe - stopped_high) / math.sqrt(episodes))
        count_ok = bool(np.all(lengths >= nhe))
        hazard_ok = rate_theta * mean_nhe - p_stop_high >= -n_se * se_bound - SLACK
        passed = passed and count_ok and hazard_ok
        means[label] = (mean_l, se_l)
        estimates[label] = {
            "mean_length": mean_l,
            "length_standard_error": se_l,
            "mean_nhe": mean_nhe,
            "p_stop_high": p_stop_high,
            "length_ge_nhe": count_ok,
            "hazard_count_bound": hazard_ok,
            "ratio_form": mean_nhe / rate_theta,
            "ratio_form_holds": mean_l >= mean_nhe / rate_theta,
        }
    (l1, se1), (l2, se2) = means["low"], means["high"]
    dominance = l1 <= l2 + n_se * math.hypot(se1, se2) + SLACK
    estimates["dominance"] = dominance
    return CheckReport("hazard_dominance", bool(passed and dominance), estimates, {"standard_errors": n_se})


def _dirichlet(rng: np.random.Generator, size: int) -> np.ndarray:
    return rng.dirichlet(np.ones(size))


def _budget_violations(pi: np.ndarray, ref: np.ndarray, f: np.ndarray, bound: float) -> tuple[float, float]:
    """Excess over the Pinsker-type and Donsker-Varadhan bounds (<= 0 means the bound holds)."""
    kl = max(float(rel_entr(pi, ref).sum()), 0.0)
    gap = abs(float(pi @ f - ref @ f))
    pinsker_excess = gap - bound * math.sqrt(2.0 * kl)
    dv = np.array([(logsumexp(eta * f, b=ref) + kl) / eta for eta in DV_ETAS])
    dv_excess = float(pi @ f) - float(dv.min())
    return pinsker_excess, dv_excess


def budget_bounds_check(
    n_pairs: int = 1000, alphabet: int = 16, bound: float = 1.0, seed: int = 0
) -> CheckReport:
    """Exact finite-alphabet checks of both moment-budget bounds on random pairs.

    Also covers pi == ref (both sides zero) and a point mass against the uniform
    distribution with an indicator function.
    """
    rng = rng_for(seed)
    cases: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    for _ in range(n_pairs):
        cases.append((_dirichlet(rng, alphabet), _dirichlet(rng, alphabet), rng.uniform(-bound, bound, alphabet)))
    same = _dirichlet(rng, alphabet)
    cases.append((same, same.copy(), rng.uniform(-bound, bound, alphabet)))
    point = np.eye(1, alphabet, 0)[0]
    cases.append((point, np.full(alphabet, 1.0 / alphabet), np.minimum(point, bound)))
    pinsker_worst = -math.inf
    dv_worst = -math.inf
    pinsker_violations = 0
    dv_violations = 0
    for pi, ref, f in cases:
        p_excess, d_excess = _budget_violations(pi, ref, f, bound)
        pinsker_worst = max(pinsker_worst, p_excess)
        dv_worst = max(dv_worst, d_excess)
        pinsker_violations += p_excess > SLACK
        dv_violations += d_excess > SLACK
    return CheckReport(
        "budget_bounds",
        pinsker_violations == 0 and dv_violations == 0,
        {
            "pairs": len(cases),
            "alphabet": alphabet,
            "pinsker_violations": int(pinsker_violations),
            "dv_violations": int(dv_violations),
            "pinsker_worst_excess": pinsker_worst,
            "dv_worst_excess": dv_worst,
        },
        {"slack": SLACK, "eta_grid": [float(DV_ETAS[0]), float(DV_ETAS[-1]), len(DV_ETAS)]},
    )


def tilt_optimality_check(
    n_trials: int = 200, alphabet: int = 16, kappa: float = 0.5, competitors: int = 50, seed: int = 0
) -> CheckReport:
    """pi* ~ ref * exp(r / kappa) attains max_pi E_pi r - kappa KL(pi || ref) = kappa log E_ref exp(r / kappa)."""
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    rng = rng_for(seed)
    worst_identity = 0.0
    worst_competitor = -math.inf
    for _ in range(n_trials):
        ref = _dirichlet(rng, alphabet)
        r = rng.uniform(-1.0, 1.0, alphabet)
        tilted = softmax(np.log(ref) + r / kappa)
        value = float(tilted @ r) - kappa * float(rel_entr(tilted, ref).sum())
        closed_form = kappa * float(logsumexp(r / kappa, b=ref))
        worst_identity = max(worst_identity, abs(value - closed_form))
        for _ in range(competitors):
            pi = _dirichlet(rng, alphabet)
            other = float(pi @ r) - kappa * float(rel_entr(pi, ref).sum())
            worst_competitor = max(worst_competitor, other - closed_form)
    passed = worst_identity <= 1e-9 and worst_competitor <= SLACK
    return CheckReport(
        "tilt_optimality",
        passed,
        {"trials": n_trials, "kappa": kappa, "identity_error": worst_identity, "best_competitor_gap": worst_competitor},
        {"identity": 1e-9, "slack": SLACK},
    )


def _monotone_hazard(theta: float) -> Hazard:
    def hazard(h: np.ndarray) -> np.ndarray:
        return 0.3 / (1.0 + np.exp(2.0 * (np.asarray(h) - theta))) + 0.02

    return hazard


def run_all_checks(seed: int = 0) -> dict[str, Any]:
    """Every check at its default size; the report the ``theory`` command writes."""
    rng = rng_for(derive_seed(seed, 100))
    path_low = rng.uniform(0.0, 2.0, 64)
    path_high = path_low + rng.uniform(0.0, 1.0, 64)
    checks = [
        group_variance_check(8, bernoulli_rewards(0.5), 100_000, derive_seed(seed, 1)),
        group_variance_check(2, bernoulli_rewards(0.5), 100_000, derive_seed(seed, 2)),
        *[
            kl_penalty_inflation_check(8, kappa, correlated_pair(1.0, 0.5, 0.0), 100_000, derive_seed(seed, 3, i))
            for i, kappa in enumerate((0.5, 1.0, 2.0))
        ],
        renewal_linearity_check(seed=derive_seed(seed, 4)),
        hazard_dominance_check(_monotone_hazard(1.0), path_low, path_high, 1.0, seed=derive_seed(seed, 5)),
        budget_bounds_check(seed=derive_seed(seed, 6)),
        tilt_optimality_check(seed=derive_seed(seed, 7)),
    ]
    for check in checks:
        level = logging.INFO if check.passed else logging.WARNING
        logger.log(level, f"{check.name}: {'pass' if check.passed else 'FAIL'}")
    return {"seed": seed, "passed": all(c.passed for c in checks), "checks": [c.to_dict() for c in checks]}
