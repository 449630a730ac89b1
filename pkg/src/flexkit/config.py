"""Pipeline configuration: one JSON document that fully determines a run.

The document holds the retriever fields (indexes, fusion, store, encoder,
refine, ...) at top level plus optional ``cache`` and ``log_level`` blocks.
String values may reference environment variables as ``${NAME}``.  Loading
checks everything up front and reports every problem in one error.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .cache import QueryCache, default_cache_dir
from .encoder import EncoderError
from .retriever import FlexRetriever, RetrieverConfig, RetrieverError

_VAR = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")
_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


class ConfigError(Exception):
    def __init__(self, problems: list[str], source: str | None = None) -> None:
        self.problems = list(problems)
        where = f"{source}: " if source else ""
        super().__init__(where + "; ".join(self.problems))


@dataclass(frozen=True)
class CacheSettings:
    enabled: bool = True
    directory: str | None = None
    capacity: int = 10_000


@dataclass(frozen=True)
class PipelineConfig:
    retriever: RetrieverConfig
    base_dir: Path
    cache: CacheSettings = field(default_factory=CacheSettings)
    log_level: str = "WARNING"

    def build_retriever(self) -> FlexRetriever:
        return FlexRetriever.from_config(self.retriever, self.base_dir)

    def open_cache(self) -> QueryCache | None:
        if not self.cache.enabled:
            return None
        directory = self.cache.directory
        path = self.base_dir / directory if directory else default_cache_dir()
        return QueryCache(path, self.cache.capacity)


def interpolate(value: Any, env: Mapping[str, str], missing: set[str]) -> Any:
    """Replace ``${NAME}`` in every string; unknown names are collected."""
    if isinstance(value, str):

        def sub(m: re.Match) -> str:
            name = m.group(1)
            if name not in env:
                missing.add(name)
                return m.group(0)
            return env[name]

        return _VAR.sub(sub, value)
    if isinstance(value, list):
        return [interpolate(v, env, missing) for v in value]
    if isinstance(value, dict):
        return {k: interpolate(v, env, missing) for k, v in value.items()}
    return value


def _cache_settings(raw: Any, problems: list[str]) -> CacheSettings:
    if raw is None:
        return CacheSettings()
    if not isinstance(raw, dict):
        problems.append("cache must be an object")
        return CacheSettings()
    unknown = set(raw) - {"enabled", "directory", "capacity"}
    if unknown:
        problems.append(f"unknown cache keys: {sorted(unknown)}")
    settings = CacheSettings(
        enabled=bool(raw.get("enabled", True)),
        directory=raw.get("directory"),
        capacity=raw.get("capacity", 10_000),
    )
    if not isinstance(settings.capacity, int) or settings.capacity < 1:
        problems.append("cache.capacity must be a positive integer")
    return settings


def config_from_dict(
    data: Mapping[str, Any], base_dir: str | Path = ".", env: Mapping[str, str] | None = None, source: str | None = None
) -> PipelineConfig:
    base = Path(base_dir)
    problems: list[str] = []
    missing: set[str] = set()
    data = interpolate(dict(data), os.environ if env is None else env, missing)
    problems += [f"environment variable {name} is not set" for name in sorted(missing)]

    cache = _cache_settings(data.pop("cache", None), problems)
    log_level = str(data.pop("log_level", "WARNING")).upper()
    if log_level not in _LOG_LEVELS:
        problems.append(f"log_level must be one of {_LOG_LEVELS}")

    if data.get("store") is not None and not (base / data["store"]).is_file():
        problems.append(f"store file not found: {data['store']}")
    for entry in data.get("indexes") or ():
        if isinstance(entry, dict) and entry.get("type") != "remote" and entry.get("path"):
            if not (base / entry["path"]).is_file():
                problems.append(f"index {entry.get('name')!r}: file not found: {entry['path']}")

    retriever: RetrieverConfig | None = None
    try:
        retriever = RetrieverConfig.from_dict(data)
    except (RetrieverError, EncoderError, ValueError, TypeError) as exc:
        problems.append(str(exc))
    if problems:
        raise ConfigError(problems, source)
    assert retriever is not None
    return PipelineConfig(retriever, base, cache, log_level)


def load_config(path: str | Path, env: Mapping[str, str] | None = None) -> PipelineConfig:
    """Read a pipeline config; relative paths resolve against its directory."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError([f"cannot read config: {exc.strerror}"], str(path)) from None
    except ValueError as exc:
        raise ConfigError([f"invalid JSON: {exc}"], str(path)) from None
    if not isinstance(data, dict):
        raise ConfigError(["config must be a JSON object"], str(path))
    return config_from_dict(data, path.parent, env, str(path))


def configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s")
