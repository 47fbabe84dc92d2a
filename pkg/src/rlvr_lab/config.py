"""Flat ``key = value`` text form of :class:`TrainConfig`.

Nested sections use dotted keys (``objective.beta``, ``filter.t_easy``);
top-level fields are bare (``K``, ``max_iterations``). Blank lines and lines
starting with ``#`` are ignored. The rendered form lists every key in a fixed
order so two configs can be compared with a plain diff.
"""

from __future__ import annotations

import dataclasses
from dataclasses import replace
from pathlib import Path
from typing import Any, Iterable

from rlvr_lab.trainer import TrainConfig


class ConfigError(ValueError):
    pass


def flatten(config: TrainConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            for g in dataclasses.fields(value):
                out[f"{f.name}.{g.name}"] = getattr(value, g.name)
        else:
            out[f.name] = value
    return out


def valid_keys() -> list[str]:
    return list(flatten(TrainConfig()))


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def render(config: TrainConfig) -> str:
    return "".join(f"{k} = {_render(v)}\n" for k, v in flatten(config).items())


def _coerce(key: str, raw: str, like: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def apply_overrides(config: TrainConfig, pairs: Iterable[tuple[str, str]]) -> TrainConfig:
    """Set dotted keys from string values; unknown keys list the valid ones."""
    flat = flatten(config)
    updates: dict[str, Any] = {}
    for key, raw in pairs:
        key = key.strip()
        if key not in flat:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(flat)}")
        updates[key] = _coerce(key, raw, flat[key])
    sections: dict[str, dict[str, Any]] = {}
    top: dict[str, Any] = {}
    for key, value in updates.items():
        if "." in key:
            sec, name = key.split(".", 1)
            sections.setdefault(sec, {})[name] = value
        else:
            top[key] = value
    try:
        for sec, kw in sections.items():
            top[sec] = replace(getattr(config, sec), **kw)
        return replace(config, **top)
    except ValueError as exc:  # invariant checks in the dataclasses
        raise ConfigError(str(exc)) from None


def parse_pairs(lines: Iterable[str], source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def parse_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def load(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    path = Path(path)
    pairs = parse_pairs(path.read_text("utf-8").splitlines(), str(path))
    return apply_overrides(base or TrainConfig(), pairs)
