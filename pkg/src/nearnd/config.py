"""Experiment config files: YAML key-value trees with line-aware validation.

The file is parsed twice: once into plain data and once into the node tree,
whose marks let every schema violation name the offending file and line.
CLI flags override individual keys after loading; the config hash is taken
over the resolved tree so artifacts record exactly what ran.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import yaml


class ConfigError(Exception):
    """A config file is missing, malformed, or violates the schema."""


def _collect_lines(node, prefix: tuple, out: dict) -> None:
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (str(key_node.value),)
            out[path] = key_node.start_mark.line + 1
            _collect_lines(value_node, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _collect_lines(item, prefix + (str(i),), out)


class ConfigView:
    """Typed access into a parsed config tree with line-numbered errors."""

    def __init__(self, data: dict, lines: dict, path: Path):
        self.data = data
        self.lines = lines
        self.path = path

    def _where(self, keypath: tuple) -> str:
        line = self.lines.get(keypath)
        loc = f"{self.path}:{line}" if line else str(self.path)
        return f"{loc}: {'.'.join(keypath)}"

    def _lookup(self, key: str, default, required: bool):
        parts = tuple(key.split("."))
        node = self.data
        for i, part in enumerate(parts):
            if not isinstance(node, dict) or part not in node:
                if required:
                    raise ConfigError(f"{self.path}: missing required key '{key}'")
                return default, parts
            node = node[part]
        return node, parts

    def _typed(self, key: str, types, type_name: str, default, required: bool):
        value, parts = self._lookup(key, default, required)
        if value is default and not required:
            return default
        if value is None and not required:
            return default
        if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
            raise ConfigError(f"{self._where(parts)}: expected {type_name}, got a boolean")
        if not isinstance(value, types):
            raise ConfigError(f"{self._where(parts)}: expected {type_name}, got {value!r}")
        return value

    def get_int(self, key: str, default=None, required: bool = False) -> int | None:
        return self._typed(key, int, "an integer", default, required)

    def get_float(self, key: str, default=None, required: bool = False) -> float | None:
        value = self._typed(key, (int, float), "a number", default, required)
        return None if value is None else float(value)

    def get_str(self, key: str, default=None, required: bool = False, choices=None) -> str | None:
        value = self._typed(key, str, "a string", default, required)
        if value is not None and choices and value not in choices:
            parts = tuple(key.split("."))
            raise ConfigError(f"{self._where(parts)}: must be one of {sorted(choices)}, got {value!r}")
        return value

    def get_list(self, key: str, default=None, required: bool = False) -> list | None:
        return self._typed(key, list, "a list", default, required)

    def get_dict(self, key: str, default=None, required: bool = False) -> dict | None:
        return self._typed(key, dict, "a mapping", default, required)

    def get_pair(self, key: str, default=None, required: bool = False) -> tuple[float, float] | None:
        value = self.get_list(key, default=None, required=required)
        if value is None:
            return default
        parts = tuple(key.split("."))
        if len(value) != 2 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{self._where(parts)}: expected a pair of numbers, got {value!r}")
        return (float(value[0]), float(value[1]))

    def override(self, key: str, value) -> None:
        parts = key.split(".")
        node = self.data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value

    def resolved_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.data, sort_keys=True).encode("utf-8")).hexdigest()


def load_config(path: str | Path) -> ConfigView:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file '{path}' does not exist")
    text = path.read_text()
    try:
        data = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    lines: dict = {}
    if node is not None:
        _collect_lines(node, (), lines)
    return ConfigView(data, lines, path)
