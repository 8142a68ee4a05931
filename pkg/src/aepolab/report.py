"""
CSV exports: per-bucket and global training series read from a metrics log, entropy
shaping curves, per-trajectory reward rows and entropy-analysis rows.
"""

import csv
import json
import logging
import os
from collections.abc import Iterable, Sequence
from typing import Any, Optional

import numpy as np

from .difficulty import Bucket
from .entropy import EntropyProfile
from .policy import Trajectory
from .reward import REWARD_CSV_HEADER, RewardMode, ShapedReward, shaping_curve

__all__ = [
    "ANALYSIS_CSV_HEADER",
    "GLOBAL_CSV_HEADER",
    "SERIES_CSV_HEADER",
    "SHAPING_CSV_HEADER",
    "read_metrics",
    "run_report",
    "write_analysis_rows",
    "write_reward_rows",
]

logger = logging.getLogger(__name__)

SERIES_CSV_HEADER = [
    "iter",
    "mode",
    "n_prompts",
    "accuracy_mean",
    "length_mean",
    "nhe_mean",
    "kl_ctrl",
    "kappa",
    "lambda",
    "hwe_target",
]
GLOBAL_CSV_HEADER = [
    "iter",
    "mode",
    "accuracy_mean",
    "length_mean",
    "nhe_mean",
    "filtered_fraction",
    "tau_high",
    "loss",
    "clip_fraction",
    "skipped",
]
SHAPING_CSV_HEADER = ["mode", "bucket", "accuracy", "lambda", "deviation", "entropy_term"]
ANALYSIS_CSV_HEADER = ["length", "n_he", "accuracy"]

SHAPING_DELTAS = np.arange(-20.0, 21.0)
SHAPING_LAMBDA = 0.1


def _cell(value: Any) -> Any:
    return "" if value is None else value


def _writer_for(path: str) -> tuple[Any, Any]:
    dir_name = os.path.dirname(path)
    if dir_name:
        os.makedirs(dir_name, exist_ok=True)
    f = open(path, "w", newline="")
    return f, csv.writer(f)


def read_metrics(path: str) -> tuple[Optional[dict[str, Any]], list[dict[str, Any]]]:
    """The config echo (if any) and the per-iteration records of a metrics log."""
    config = None
    records = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj.get("type") == "config":
                config = obj.get("config")
            elif obj.get("type") == "metrics":
                records.append(obj)
    return config, records


def _write_rows(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    f, writer = _writer_for(path)
    with f:
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def run_report(metrics_path: str, out_dir: str) -> list[str]:
    """Write one series file per bucket plus the global series and the shaping curves."""
    if not os.path.exists(metrics_path):
        raise FileNotFoundError(f"Metrics log not found: {metrics_path}")
    _, records = read_metrics(metrics_path)
    if not records:
        logger.warning(f"{metrics_path} holds no metrics records, writing header-only files")
    written = []
    for bucket in Bucket:
        path = os.path.join(out_dir, f"series_{bucket.value}.csv")
        rows = []
        for rec in records:
            b = rec["buckets"][bucket.value]
            rows.append([rec["iter"], rec["mode"]] + [b.get(k) for k in SERIES_CSV_HEADER[2:]])
        _write_rows(path, SERIES_CSV_HEADER, rows)
        written.append(path)

    path = os.path.join(out_dir, "global.csv")
    _write_rows(path, GLOBAL_CSV_HEADER, ([rec.get(k) for k in GLOBAL_CSV_HEADER] for rec in records))
    written.append(path)

    path = os.path.join(out_dir, "shaping_curves.csv")
    rows = []
    for mode in RewardMode:
        for bucket in Bucket:
            for accuracy in (0, 1):
                terms = shaping_curve(SHAPING_DELTAS, bucket, SHAPING_LAMBDA, accuracy, mode)
                for delta, term in zip(SHAPING_DELTAS, terms):
                    rows.append([mode.value, bucket.value, accuracy, SHAPING_LAMBDA, float(delta), float(term)])
    _write_rows(path, SHAPING_CSV_HEADER, rows)
    written.append(path)
    logger.info(f"Report: {len(records)} iterations into {len(written)} files under {out_dir}")
    return written


def write_reward_rows(path: str, rewards: Iterable[ShapedReward], append: bool = False) -> None:
    exists = append and os.path.exists(path)
    dir_name = os.path.dirname(path)
    if dir_name:
        os.makedirs(dir_name, exist_ok=True)
    with open(path, "a" if append else "w", newline="") as f:
        writer = csv.writer(f)
        if not exists:
            writer.writerow(REWARD_CSV_HEADER)
        for reward in rewards:
            writer.writerow([_cell(v) for v in reward.to_row()])


def write_analysis_rows(path: str, trajectories: Sequence[Trajectory], profiles: Sequence[EntropyProfile]) -> None:
    _write_rows(
        path,
        ANALYSIS_CSV_HEADER,
        ([t.length, p.hwe_count, t.accuracy] for t, p in zip(trajectories, profiles)),
    )
