"""YAML loading with source line tracking for config validation errors."""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Any, Optional

import yaml

LINE = "__line__"


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        self.message = message
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(f"{where}{message}")

    def at(self, path: str) -> "ConfigError":
        return ConfigError(self.message, path, self.line)


class _LineLoader(yaml.SafeLoader):
    def construct_mapping(self, node, deep=False):
        mapping = super().construct_mapping(node, deep=deep)
        mapping[LINE] = node.start_mark.line + 1
        return mapping


def loads(text: str, path: str | None = None) -> Any:
    try:
        return yaml.load(text, Loader=_LineLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = None if mark is None else mark.line + 1
        raise ConfigError(str(exc.problem or exc), path, line) from exc
    except yaml.YAMLError as exc:
        raise ConfigError(str(exc), path) from exc


def load(path: str | Path) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(exc.strerror or str(exc), str(path)) from exc
    return loads(text, str(path))


def strip(value: Any) -> Any:
    """Drop line markers recursively."""
    if isinstance(value, dict):
        return {k: strip(v) for k, v in value.items() if k != LINE}
    if isinstance(value, list):
        return [strip(v) for v in value]
    return value


def line_of(value: Any) -> Optional[int]:
    return value.get(LINE) if isinstance(value, dict) else None


def dump(path: str | Path, doc: Any) -> None:
    Path(path).write_text(dumps(doc), encoding="utf-8")


def dumps(doc: Any) -> str:
    return yaml.safe_dump(doc, sort_keys=False, allow_unicode=True, width=100)


def as_int(value: Any) -> int:
    if isinstance(value, bool):
        raise ValueError(f"expected an integer, got {value!r}")
    if isinstance(value, int):
        return value
    return int(str(value), 0)


def int_map(value: Any) -> dict[int, int]:
    return {as_int(k): int(v) for k, v in (value or {}).items() if k != LINE}


def hexbyte(value: int) -> str:
    return f"0x{value:02X}"


def data_path(name: str) -> Path:
    return Path(str(resources.files("udsmon") / "data" / name))
