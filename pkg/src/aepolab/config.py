"""
Experiment configuration.

Values resolve in layers: dataclass defaults, then a flat TOML file, then ``AEPOLAB_*``
environment variables, then command-line flags. Keys are matched case-insensitively and
ignore ``_``/``-`` so ``--group-size``, ``groupSize`` and ``AEPOLAB_GROUP_SIZE`` all reach
``group_size``.
"""

import dataclasses
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any, Optional

import tomlkit

from .difficulty import Bucket
from .env import PrefixedEnv

__all__ = ["ExperimentConfig", "dump_config", "load_config", "resolve_config"]

logger = logging.getLogger(__name__)

MODES = ("aepo", "grpo", "dapo")
REWARD_MODES = ("canonical", "encourage")
_TRUE = ("true", "t", "yes", "y", "1", "on", "enabled")
_FALSE = ("false", "f", "no", "n", "0", "off", "disabled")
_LIST_ITEM_TYPES = {"semantic_allowlist": int, "task_knobs": int, "task_weights": float}


@dataclass
class ExperimentConfig:
    mode: str = "aepo"
    reward_mode: str = "canonical"
    seed: int = 0
    iterations: int = 200
    warmup_iterations: int = 40
    batch_size: int = 16
    group_size: int = 8
    window_size: int = 4
    quantile: float = 0.95
    kl_relax: float = 0.5
    clip_low: float = 0.2
    clip_high: float = 0.28
    kappa_lr: float = 0.1
    kappa_init: float = 1.0
    kappa_min: float = 0.1
    kappa_max: float = 10.0
    kl_base: float = 0.01
    kl_budget_easy: float = 0.01
    kl_budget_medium: float = 0.02
    kl_budget_hard: float = 0.04
    kl_beta_grpo: float = 0.01
    ema_decay: float = 0.9
    learning_rate: float = 2.0
    learning_rate_aepo: float = 40.0
    lagrange_eps: float = 1e-8
    adv_eps: float = 1e-8
    vocab_size: int = 12
    context_order: int = 2
    n_connectives: int = 3
    semantic_allowlist: list[int] = field(default_factory=list)
    max_len: int = 16
    temperature: float = 1.0
    top_p: float = 0.99
    branches_per_trigger: int = 1
    max_triggers: int = 1
    branches_join_group: bool = True
    filter_lo: float = 0.01
    filter_hi: float = 0.99
    updates_per_iteration: int = 2
    checkpoint_every: int = 10
    dump_trajectories: bool = False
    workers: int = 1
    entropy_shaping: bool = True
    dynamic_kl: bool = True
    task_knobs: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    task_weights: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward_mode must be one of {REWARD_MODES}, got {self.reward_mode!r}")
        _require(self.seed >= 0, "seed", self.seed, ">= 0")
        _require(self.iterations >= 0, "iterations", self.iterations, ">= 0")
        _require(self.warmup_iterations >= 0, "warmup_iterations", self.warmup_iterations, ">= 0")
        _require(self.batch_size >= 1, "batch_size", self.batch_size, ">= 1")
        _require(self.group_size >= 2, "group_size", self.group_size, ">= 2")
        _require(self.window_size >= 1, "window_size", self.window_size, ">= 1")
        _require(0 < self.quantile < 1, "quantile", self.quantile, "in (0, 1)")
        _require(0 < self.kl_relax <= 1, "kl_relax", self.kl_relax, "in (0, 1]")
        _require(0 < self.clip_low < 1, "clip_low", self.clip_low, "in (0, 1)")
        _require(0 < self.clip_high < 1, "clip_high", self.clip_high, "in (0, 1)")
        _require(self.kappa_lr >= 0, "kappa_lr", self.kappa_lr, ">= 0")
        _require(0 < self.kappa_min <= self.kappa_max, "kappa_min", self.kappa_min, "in (0, kappa_max]")
        _require(
            self.kappa_min <= self.kappa_init <= self.kappa_max, "kappa_init", self.kappa_init, "in kappa bounds"
        )
        for name in ("kl_base", "kl_budget_easy", "kl_budget_medium", "kl_budget_hard", "kl_beta_grpo"):
            _require(getattr(self, name) > 0, name, getattr(self, name), "> 0")
        _require(0 <= self.ema_decay <= 1, "ema_decay", self.ema_decay, "in [0, 1]")
        _require(self.learning_rate > 0, "learning_rate", self.learning_rate, "> 0")
        _require(self.learning_rate_aepo > 0, "learning_rate_aepo", self.learning_rate_aepo, "> 0")
        _require(self.lagrange_eps > 0, "lagrange_eps", self.lagrange_eps, "> 0")
        _require(self.adv_eps >= 0, "adv_eps", self.adv_eps, ">= 0")
        _require(self.n_connectives >= 1, "n_connectives", self.n_connectives, ">= 1")
        _require(
            self.vocab_size - self.n_connectives - 1 >= 2,
            "vocab_size",
            self.vocab_size,
            f"large enough for 2 digits besides {self.n_connectives} connectives and STOP",
        )
        _require(self.context_order >= 1, "context_order", self.context_order, ">= 1")
        stop = self.vocab_size - 1
        for token in self.semantic_allowlist:
            _require(0 <= token < stop, "semantic_allowlist", self.semantic_allowlist, f"ids in [0, {stop})")
        _require(self.max_len >= 1, "max_len", self.max_len, ">= 1")
        _require(self.temperature > 0, "temperature", self.temperature, "> 0")
        _require(0 < self.top_p <= 1, "top_p", self.top_p, "in (0, 1]")
        _require(self.branches_per_trigger >= 0, "branches_per_trigger", self.branches_per_trigger, ">= 0")
        _require(self.max_triggers >= 0, "max_triggers", self.max_triggers, ">= 0")
        _require(self.filter_lo < self.filter_hi, "filter_lo", self.filter_lo, "< filter_hi")
        _require(self.updates_per_iteration >= 1, "updates_per_iteration", self.updates_per_iteration, ">= 1")
        _require(self.checkpoint_every >= 1, "checkpoint_every", self.checkpoint_every, ">= 1")
        _require(self.workers >= 1, "workers", self.workers, ">= 1")
        _require(bool(self.task_knobs) and min(self.task_knobs) >= 1, "task_knobs", self.task_knobs, "nonempty, >= 1")
        if self.task_weights:
            _require(
                len(self.task_weights) == len(self.task_knobs)
                and min(self.task_weights) >= 0
                and sum(self.task_weights) > 0,
                "task_weights",
                self.task_weights,
                "one nonnegative weight per knob with positive sum",
            )

    @property
    def total_iterations(self) -> int:
        """Warm-up iterations followed by ``iterations`` training iterations."""
        return self.warmup_iterations + self.iterations

    @property
    def kl_budgets(self) -> dict[Bucket, float]:
        return {
            Bucket.EASY: self.kl_budget_easy,
            Bucket.MEDIUM: self.kl_budget_medium,
            Bucket.HARD: self.kl_budget_hard,
        }

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        values = (base or cls()).to_dict()
        for key, raw in data.items():
            name = _field_name(key)
            values[name] = _coerce(name, raw, values[name])
        return cls(**values)


def _require(ok: bool, name: str, value: Any, expectation: str) -> None:
    if not ok:
        raise ValueError(f"Invalid config {name}={value!r}: expected {expectation}")


def _normalize(key: str) -> str:
    return key.replace("_", "").replace("-", "").lower()


_FIELDS = {_normalize(f.name): f.name for f in dataclasses.fields(ExperimentConfig)}


def _field_name(key: str) -> str:
    name = _FIELDS.get(_normalize(key))
    if name is None:
        raise ValueError(f"Unknown config key: {key}")
    return name


def _coerce(name: str, raw: Any, default: Any) -> Any:
    """Convert a TOML, environment or flag value to the type of the field's default."""
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ValueError(f"Invalid boolean for {name}: {raw!r}")
    if isinstance(default, list):
        item_type = _LIST_ITEM_TYPES[name]
        items = raw if isinstance(raw, (list, tuple)) else [s for s in str(raw).split(",") if s.strip()]
        try:
            return [item_type(s) for s in items]
        except (TypeError, ValueError) as e:
            raise ValueError(f"Invalid list for {name}: {raw!r}") from e
    if isinstance(default, (int, float)) and isinstance(raw, bool):
        raise ValueError(f"Invalid number for {name}: {raw!r}")
    try:
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (TypeError, ValueError) as e:
        raise ValueError(f"Invalid number for {name}: {raw!r}") from e
    return str(raw)


def dump_config(config: ExperimentConfig) -> str:
    doc = tomlkit.document()
    for key, value in config.to_dict().items():
        doc.add(key, value)
    return tomlkit.dumps(doc)


def load_config(path: str) -> dict[str, Any]:
    with open(path) as f:
        data = tomlkit.parse(f.read()).unwrap()
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ValueError(f"Config file {path} must be flat, found tables: {nested}")
    return data


def resolve_config(
    config_path: Optional[str] = None,
    cli_overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[PrefixedEnv] = None,
) -> ExperimentConfig:
    config = ExperimentConfig()
    if config_path:
        config = ExperimentConfig.from_mapping(load_config(config_path), config)
        logger.debug(f"Loaded config file {config_path}")
    env_values = (environ or PrefixedEnv()).overrides(_FIELDS.values())
    if env_values:
        logger.debug(f"Environment overrides: {sorted(env_values)}")
        config = ExperimentConfig.from_mapping(env_values, config)
    if cli_overrides:
        config = ExperimentConfig.from_mapping(cli_overrides, config)
    return config
