"""
Command-line entry point: ``aepolab <train|curate|analyze|theory|report> [--flags]``.

Exit status is 0 on success, 1 when ``theory`` finds a failing check and 2 on bad input.
"""

import json
import logging
import os
import sys
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Optional

from .aepo import TrainState, train_step
from .args import ArgMap
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config, resolve_config
from .curator import read_corpus, select_responses, write_bracket_summary, write_curated
from .difficulty import RolloutGroup
from .entropy import SemanticVocab, analyze_trajectories
from .env import env
from .policy import TaskFamily, read_trajectories, write_trajectories
from .report import run_report, write_analysis_rows, write_reward_rows
from .theory import run_all_checks

__all__ = ["main", "run_train"]

logger = logging.getLogger(__name__)

COMMANDS = ("train", "curate", "analyze", "theory", "report")
DEFAULT_OUT = "runs/aepolab"
METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.json"

_COMMON_FLAGS = ("config", "out", "log-level", "print-config")
_TRAIN_FLAGS = _COMMON_FLAGS + ("resume",)
_ANALYZE_FLAGS = _COMMON_FLAGS + ("input", "tau")
_CURATE_FLAGS = ("input", "out", "brackets", "quota", "seed", "log-level")
_THEORY_FLAGS = ("out", "seed", "log-level")
_REPORT_FLAGS = ("metrics", "out", "log-level")


def _json_line(obj: dict[str, Any]) -> str:
    return json.dumps(obj, sort_keys=True) + "\n"


def _truncate_metrics(path: str, iteration: int) -> None:
    """Drop records at or after ``iteration`` so a resumed run appends where the checkpoint left off."""
    if not os.path.exists(path):
        return
    with open(path) as f:
        lines = f.readlines()
    kept = [line for line in lines if line.strip() and json.loads(line).get("iter", -1) < iteration]
    with open(path, "w") as f:
        f.writelines(kept)


def run_train(config: ExperimentConfig, out_dir: str, resume: Optional[str] = None) -> TrainState:
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, METRICS_FILE)
    checkpoint_path = os.path.join(out_dir, CHECKPOINT_FILE)
    if resume:
        state = load_checkpoint(resume)
        if config.iterations != state.config.iterations:
            state.config = ExperimentConfig.from_mapping({"iterations": config.iterations}, state.config)
        config = state.config
        _truncate_metrics(metrics_path, state.iteration)
        logger.info(f"Resuming from {resume} at iteration {state.iteration}")
    else:
        state = TrainState.initial(config)
        with open(metrics_path, "w") as f:
            f.write(_json_line({"type": "config", "config": config.to_dict()}))
        save_checkpoint(checkpoint_path, state)

    trajectories_path = os.path.join(out_dir, "trajectories.jsonl")
    rewards_path = os.path.join(out_dir, "rewards.csv")

    def dump(iteration: int, groups: list[RolloutGroup]) -> None:
        members = [t for g in groups for t in g.members]
        write_trajectories(trajectories_path, members, append=iteration > 0)
        write_reward_rows(rewards_path, [r for g in groups for r in g.rewards], append=iteration > 0)

    sink = dump if config.dump_trajectories else None
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        with open(metrics_path, "a") as metrics:
            while state.iteration < config.total_iterations:
                record = train_step(state, pool=pool, sink=sink)
                metrics.write(_json_line(record.to_record()))
                metrics.flush()
                if state.iteration % config.checkpoint_every == 0 or state.iteration == config.total_iterations:
                    save_checkpoint(checkpoint_path, state)
    finally:
        if pool is not None:
            pool.shutdown()
    return state


def _configure_logging(flags: ArgMap) -> None:
    level = flags.get("log-level") or env.get("log_level") or "INFO"
    logging.basicConfig(level=level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _check_flags(flags: ArgMap, allowed: Sequence[str]) -> None:
    unknown = sorted(flags.pop_known(*allowed))
    if unknown:
        raise ValueError(f"Unknown flags: {', '.join('--' + k for k in unknown)}")


def _config_from(flags: ArgMap, known: Sequence[str]) -> ExperimentConfig:
    return resolve_config(flags.get("config"), flags.pop_known(*known))


def _train(flags: ArgMap) -> int:
    config = _config_from(flags, _TRAIN_FLAGS)
    if flags.bool("print-config"):
        print(dump_config(config), end="")
        return 0
    state = run_train(config, flags.get("out", DEFAULT_OUT), flags.get("resume"))
    logger.info(f"Training finished at iteration {state.iteration}")
    return 0


def _analyze(flags: ArgMap) -> int:
    config = _config_from(flags, _ANALYZE_FLAGS)
    if flags.bool("print-config"):
        print(dump_config(config), end="")
        return 0
    path = flags.get("input")
    if not path:
        raise ValueError("analyze needs --input TRAJECTORIES.jsonl")
    family = TaskFamily(config.vocab_size, config.n_connectives)
    vocab = SemanticVocab(frozenset(config.semantic_allowlist or family.connectives), family.stop_token)
    trajectories = read_trajectories(path)
    fixed_tau = flags.float("tau") if "tau" in flags else None
    tau, profiles = analyze_trajectories(trajectories, config.window_size, config.quantile, vocab, fixed_tau)
    out_dir = flags.get("out", DEFAULT_OUT)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "profiles.jsonl"), "w") as f:
        for profile in profiles:
            f.write(_json_line(profile.to_record()))
    write_analysis_rows(os.path.join(out_dir, "analysis.csv"), trajectories, profiles)
    logger.info(f"Analyzed {len(trajectories)} trajectories at tau={tau:.6f}")
    return 0


def _curate(flags: ArgMap) -> int:
    _check_flags(flags, _CURATE_FLAGS)
    path = flags.get("input")
    if not path:
        raise ValueError("curate needs --input CORPUS.jsonl")
    quota = flags.get("quota")
    corpus = select_responses(
        read_corpus(path),
        brackets=flags.int("brackets", 9),
        per_bracket_quota=int(quota) if quota is not None else None,
        seed=flags.int("seed", 0),
    )
    out_dir = flags.get("out", DEFAULT_OUT)
    write_curated(os.path.join(out_dir, "curated.jsonl"), corpus)
    write_bracket_summary(os.path.join(out_dir, "bracket_summary.csv"), corpus)
    return 0


def _theory(flags: ArgMap) -> int:
    _check_flags(flags, _THEORY_FLAGS)
    report = run_all_checks(flags.int("seed", 0))
    out_dir = flags.get("out", DEFAULT_OUT)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "theory_report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return 0 if report["passed"] else 1


def _report(flags: ArgMap) -> int:
    _check_flags(flags, _REPORT_FLAGS)
    out_dir = flags.get("out", DEFAULT_OUT)
    run_report(flags.get("metrics", os.path.join(out_dir, METRICS_FILE)), out_dir)
    return 0


_HANDLERS = {"train": _train, "curate": _curate, "analyze": _analyze, "theory": _theory, "report": _report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    flags = ArgMap(sys.argv[1:] if argv is None else argv)
    try:
        _configure_logging(flags)
        positionals = flags.positionals
        if len(positionals) != 1 or positionals[0] not in COMMANDS:
            raise ValueError(f"Expected exactly one command out of {', '.join(COMMANDS)}, got {positionals}")
        return _HANDLERS[positionals[0]](flags)
    except (ValueError, KeyError, FileNotFoundError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
