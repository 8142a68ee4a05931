import sys
from collections.abc import Iterator, Mapping, Sequence
from typing import Any, Optional, Union, overload

__all__ = ["ArgMap"]


class ArgMap(Mapping[str, str]):
    """A case-insensitive, camel-snake-kebab-insensitive k-v argv accessor.

    Accepts ``--key value``, ``--key=value``, ``key=value`` and bare ``--flag`` (read as
    ``"true"``). Anything else is a positional argument, e.g. the subcommand.
    """

    def __init__(self, argv: Optional[Sequence[str]] = None) -> None:
        self._argv = argv
        self._data: Optional[dict[str, str]] = None
        self._positionals: list[str] = []

    def _ensure_data(self) -> dict[str, str]:
        if self._data is None:
            self._data = {}
            argv = sys.argv[1:] if self._argv is None else list(self._argv)
            previous_flag = None
            for arg in argv:
                if arg.startswith("--"):
                    key, sep, value = arg[2:].partition("=")
                    previous_flag = None if sep else key
                    if not sep:
                        value = "true"
                elif previous_flag:
                    self._data[previous_flag] = arg
                    previous_flag = None
                    continue
                elif "=" in arg:
                    key, value = arg.split("=", 1)
                else:
                    self._positionals.append(arg)
                    continue
                if not key:
                    raise ValueError(f"Empty flag name in argument: {arg}")
                if self._find(self._data, key) is not None:
                    raise ValueError(f"Duplicate key: {key}")
                self._data[key] = value
        return self._data

    @staticmethod
    def _normalize(key: str) -> str:
        return key.replace("_", "").replace("-", "").lower()

    def _find(self, data: dict[str, str], k: str) -> Optional[str]:
        if k in data:
            return k
        alt_k = self._normalize(k)
        for key in data:
            if self._normalize(key) == alt_k:
                return key
        return None

    @property
    def positionals(self) -> list[str]:
        self._ensure_data()
        return list(self._positionals)

    def __getitem__(self, k: str) -> str:
        v = self.get(k)
        if v is None:
            raise KeyError(f"Key not found: {k}")
        return v

    def __iter__(self) -> Iterator[str]:
        return iter(self._ensure_data())

    def __len__(self) -> "int":
        return len(self._ensure_data())

    def __str__(self) -> str:
        return str(self._ensure_data())

    def __repr__(self) -> str:
        cls_name = self.__class__.__name__
        return f"{cls_name}({self._ensure_data()}, positionals={self._positionals})"

    def bool(self, k: str, default: bool = False) -> bool:
        v = self.get(k)
        if v is None:
            return default
        return v.lower() in ("true", "t", "yes", "y", "1", "on", "enabled")

    def int(self, k: str, default: int = 0) -> int:
        v = self.get(k)
        if v is None:
            return default
        return int(v)

    def float(self, k: str, default: float = 0.0) -> float:
        v = self.get(k)
        if v is None:
            return default
        return float(v)

    def pop_known(self, *keys: str) -> dict[str, str]:
        """Everything except ``keys``, i.e. the config overrides."""
        data = self._ensure_data()
        skip = {self._normalize(k) for k in keys}
        return {k: v for k, v in data.items() if self._normalize(k) not in skip}

    @overload
    def get(self, k: str) -> Optional[str]: ...

    @overload
    def get(self, k: str, default: Any) -> Union[str, Any]: ...

    def get(self, k: str, default: Optional[Any] = None) -> Union[str, Optional[Any]]:
        data = self._ensure_data()
        key = self._find(data, k)
        if key is None:
            return default
        return data[key]
