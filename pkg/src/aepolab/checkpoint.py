"""
Training checkpoints as versioned JSON documents.

A checkpoint holds the schema version, the iteration it was taken after, the resolved
config, all three policy tables and the bucket state. Floats go through ``json`` at
full ``repr`` precision, so a reload continues bit-identically.
"""

import json
import logging
import os
import pathlib
import threading
from typing import Any, Optional, TypeVar, Union

from .aepo import TrainState
from .config import ExperimentConfig
from .difficulty import BucketState
from .policy import PolicyTable

__all__ = ["SCHEMA_VERSION", "CheckpointFile", "load_checkpoint", "save_checkpoint"]

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

T = TypeVar("T", bound=Any)


class CheckpointFile:
    """
    A JSON key-value document on disk, written atomically on flush.

    Can be used as a context manager:
        with CheckpointFile("out/checkpoint.json") as ckpt:
            ckpt.set("iteration", 3)
    """

    def __init__(self, file_path: str, auto_flush: bool = False) -> None:
        self._path: str = file_path
        self._cache: Optional[dict[str, Any]] = None
        self._auto_flush: bool = auto_flush
        self._dirty: bool = False
        self._lock = threading.Lock()

    @property
    def path(self) -> str:
        return self._path

    def __enter__(self) -> "CheckpointFile":
        return self

    def __exit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        if exc_type is None:
            self.flush()

    def _data(self, reload: bool = False) -> dict[str, Any]:
        if self._cache is None or reload:
            if os.path.exists(self._path):
                with open(self._path) as f:
                    self._cache = json.load(f)
            else:
                self._cache = {}
            self._dirty = False
        assert self._cache is not None
        return self._cache

    def flush(self) -> None:
        """Write pending changes through a temporary file, then rename over the target."""
        if self._cache is None or not self._dirty:
            return
        with self._lock:
            dir_name = os.path.dirname(self._path)
            if dir_name:
                pathlib.Path(dir_name).mkdir(parents=True, exist_ok=True)
            tmp_path = self._path + ".tmp"
            with open(tmp_path, "w") as f:
                json.dump(self._cache, f, indent=1, sort_keys=True)
            os.replace(tmp_path, self._path)
            self._dirty = False

    def get(self, key: str, default: Optional[T] = None, reload: bool = False) -> Union[Any, Optional[T]]:
        return self._data(reload).get(str(key), default)

    def set(self, key: str, value: Any) -> None:
        data = self._data()
        key = str(key)
        if key in data and data[key] == value:
            return
        data[key] = value
        self._dirty = True
        if self._auto_flush:
            self.flush()

    def clear(self) -> None:
        self._cache = {}
        self._dirty = True
        if self._auto_flush:
            self.flush()

    def __contains__(self, key: str) -> bool:
        return str(key) in self._data()

    def __str__(self) -> str:
        return f"{type(self).__name__}({self._path!r})"


def save_checkpoint(path: str, state: TrainState) -> None:
    with CheckpointFile(path) as ckpt:
        ckpt.clear()
        ckpt.set("schema_version", SCHEMA_VERSION)
        ckpt.set("iteration", state.iteration)
        ckpt.set("config", state.config.to_dict())
        ckpt.set("policy", state.policy.to_dict())
        ckpt.set("buckets", state.buckets.to_dict())
    logger.info(f"Wrote checkpoint {path} at iteration {state.iteration}")


def load_checkpoint(path: str) -> TrainState:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    ckpt = CheckpointFile(path)
    version = ckpt.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"Unsupported checkpoint schema version {version!r} in {path}, expected {SCHEMA_VERSION}")
    for key in ("iteration", "config", "policy", "buckets"):
        if key not in ckpt:
            raise KeyError(f"Checkpoint {path} is missing {key!r}")
    return TrainState(
        config=ExperimentConfig.from_mapping(ckpt.get("config")),
        policy=PolicyTable.from_dict(ckpt.get("policy")),
        buckets=BucketState.from_dict(ckpt.get("buckets")),
        iteration=int(ckpt.get("iteration")),
    )
