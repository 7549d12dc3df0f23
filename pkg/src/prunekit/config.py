"""Layered run configuration: defaults < config file < command-line flags."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from .trainer import TrainConfig

# keys outside TrainConfig that a run may set
DATA_DEFAULTS: dict[str, Any] = {"test_fraction": 0.2, "split_seed": 0}
SEED_ENV = "YOCO_SEED"


class ConfigError(ValueError):
    pass


def default_map() -> dict[str, Any]:
    d = TrainConfig().to_dict()
    d["lr_milestones"] = None  # resolved from epochs unless set
    d.update(DATA_DEFAULTS)
    return d


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` per line; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_config_file(path: Union[str, Path]) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))


def format_config(values: Mapping[str, Any]) -> str:
    lines = []
    for k in sorted(values):
        v = values[k]
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {'' if v is None else v}")
    return "\n".join(lines) + "\n"


@dataclass
class RunConfig:
    values: dict[str, Any]

    @classmethod
    def build(
        cls,
        file_values: Optional[Mapping[str, Any]] = None,
        flag_values: Optional[Mapping[str, Any]] = None,
        env: Optional[Mapping[str, str]] = None,
    ) -> "RunConfig":
        env = os.environ if env is None else env
        merged = default_map()
        layers = [dict(file_values or {}), {k: v for k, v in (flag_values or {}).items() if v is not None}]
        for layer in layers:
            unknown = sorted(set(layer) - set(merged))
            if unknown:
                raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
        seed_given = any("seed" in layer for layer in layers)
        if not seed_given and env.get(SEED_ENV):
            layers.insert(0, {"seed": env[SEED_ENV]})
        for layer in layers:
            merged.update({k: v for k, v in layer.items() if v is not None and v != ""})
        try:
            train = TrainConfig.from_mapping({k: v for k, v in merged.items() if k in _TRAIN_KEYS and v is not None})
            data = {"test_fraction": float(merged["test_fraction"]), "split_seed": int(merged["split_seed"])}
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        resolved = train.to_dict()
        resolved.update(data)
        return cls(resolved)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_mapping({k: self.values[k] for k in _TRAIN_KEYS})

    @property
    def test_fraction(self) -> float:
        return self.values["test_fraction"]

    @property
    def split_seed(self) -> int:
        return self.values["split_seed"]

    @property
    def config_hash(self) -> str:
        return config_hash(self.values)


_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


def config_hash(values: Mapping[str, Any]) -> str:
    """Digest independent of key order."""
    return hashlib.sha256(json.dumps(dict(values), sort_keys=True, default=str).encode()).hexdigest()
