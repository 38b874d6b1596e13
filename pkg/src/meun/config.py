"""Run configuration and the plain-text ``key=value`` config format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from meun.errors import ConfigError
from meun.model import ModelConfig


@dataclass
class RunConfig:
    # model
    input_size: int = 224
    base_channels: int = 128
    encoder: str = "mini"
    mini_stage_channels: tuple = (16, 32, 64, 64, 64)
    use_adm: bool = True
    use_uen: bool = True
    adm_fc_reduction: int = 4
    # optimisation
    lr_head: float = 3e-5
    lr_backbone: float = 3e-6
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    steps: int = 100
    seed: int = 0
    loss_reduction: str = "mean"
    iou_hw_scaling: bool = True

    def __post_init__(self):
        self.mini_stage_channels = tuple(int(c) for c in self.mini_stage_channels)
        if self.lr_head <= 0 or self.lr_backbone <= 0:
            raise ConfigError("learning rates must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError(f"loss_reduction must be mean or sum, got {self.loss_reduction!r}")
        self.model_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in ModelConfig.field_names()})

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.default for f in dataclasses.fields(RunConfig)}


def coerce(key: str, raw: str) -> Any:
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    default = _TYPES[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        values[key.strip()] = coerce(key.strip(), raw)
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)
