import os
from collections.abc import Iterable, Iterator, MutableMapping
from typing import Any, Union

__all__ = ["PrefixedEnv", "env"]

ENV_PREFIX = "AEPOLAB_"


class PrefixedEnv(MutableMapping[str, str]):
    """A case-insensitive view of the environment variables under one prefix.

    ``env["seed"]`` reads ``AEPOLAB_SEED`` (or ``aepolab_seed``); iteration yields the
    unprefixed, lower-cased keys.
    """

    def __init__(self, prefix: str = ENV_PREFIX) -> None:
        self._prefix = prefix.upper()

    def _full_key(self, key: str) -> str:
        return (self._prefix + key).upper()

    def __getitem__(self, key: str) -> str:
        v = self.get(key)
        if v == "":
            raise KeyError(key)
        return v

    def __setitem__(self, key: str, value: str) -> None:
        os.environ[self._full_key(key)] = str(value)

    def __delitem__(self, key: str) -> None:
        full_key = self._full_key(key)
        for k in list(os.environ.keys()):
            if k.upper() == full_key:
                del os.environ[k]
                return
        raise KeyError(key)

    def __iter__(self) -> Iterator[str]:
        n = len(self._prefix)
        return iter([k[n:].lower() for k in os.environ if k.upper().startswith(self._prefix)])

    def __len__(self) -> "int":
        return sum(1 for _ in self)

    def __str__(self) -> str:
        return str(dict(self))

    def __repr__(self) -> str:
        cls_name = self.__class__.__name__
        return f"{cls_name}({self._prefix!r}, {dict(self)})"

    def get(self, key: str, default: Any = "") -> Union[str, Any]:
        full_key = self._full_key(key)
        v = os.getenv(full_key)
        if v is not None:
            return v
        for k, v in os.environ.items():
            if k.upper() == full_key:
                return v
        return default

    def bool(self, key: str, default: bool = False) -> bool:
        v = self.get(key)
        if v == "":
            return default
        return v.lower() in ["true", "t", "yes", "y", "1", "on", "enabled"]

    def int(self, key: str, default: int = 0) -> int:
        v = self.get(key)
        if v == "":
            return default
        return int(v)

    def overrides(self, names: Iterable[str]) -> dict[str, str]:
        """The non-empty values among ``names``, keyed by name."""
        found = {}
        for name in names:
            v = self.get(name)
            if v != "":
                found[name] = v
        return found


env = PrefixedEnv()
