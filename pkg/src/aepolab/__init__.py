"""
aepolab - a desk-scale lab for entropy-adaptive policy optimization on toy verifiable tasks.
"""

__all__ = [
    "aepo",
    "args",
    "checkpoint",
    "cli",
    "config",
    "curator",
    "difficulty",
    "entropy",
    "env",
    "policy",
    "report",
    "reward",
    "seeding",
    "theory",
    "ExperimentConfig",
    "PolicyTable",
    "TrainState",
    "train_step",
]

import importlib as __importlib
from types import ModuleType as __ModuleType
from typing import TYPE_CHECKING as __TYPE_CHECKING
from typing import Any as __Any
from typing import Union as __Union

if __TYPE_CHECKING:
    from . import aepo  # type: ignore
    from . import args  # type: ignore
    from . import checkpoint  # type: ignore
    from . import cli  # type: ignore
    from . import config  # type: ignore
    from . import curator  # type: ignore
    from . import difficulty  # type: ignore
    from . import entropy  # type: ignore
    from . import env  # type: ignore
    from . import policy  # type: ignore
    from . import report  # type: ignore
    from . import reward  # type: ignore
    from . import seeding  # type: ignore
    from . import theory  # type: ignore
    from .aepo import TrainState as TrainState  # type: ignore
    from .aepo import train_step as train_step  # type: ignore
    from .config import ExperimentConfig as ExperimentConfig  # type: ignore
    from .policy import PolicyTable as PolicyTable  # type: ignore

_SHORTCUTS = {
    "ExperimentConfig": "config",
    "PolicyTable": "policy",
    "TrainState": "aepo",
    "train_step": "aepo",
}


def __getattr__(name: str) -> __Union[__ModuleType, __Any]:
    if name in _SHORTCUTS:
        submodule = __importlib.import_module("aepolab." + _SHORTCUTS[name])
        obj = object.__getattribute__(submodule, name)
        globals()[name] = obj
        return obj
    if name not in __all__:
        raise AttributeError(f"module 'aepolab' has no attribute {name!r}")

    submodule = __importlib.import_module("aepolab." + name)
    globals()[name] = submodule
    return submodule


def __dir__() -> list[str]:
    return __all__
