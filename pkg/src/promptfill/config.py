"""Run configuration: one flat dataclass with desk-scale defaults and strict loading."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence


class ConfigError(ValueError):
    """Unknown key, wrong type, or inconsistent values."""


@dataclass
class TrainConfig:
    seed: int = 0
    total_steps: int = 3000
    warmup_frac: float = 0.1
    peak_lr_backbone: float = 1e-4
    peak_lr_heads: float = 3e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    batch_size: int = 32
    mask_rate: float = 0.15
    tau: float = 0.07
    k: int = 4
    pooling: str = "average"
    prompt_mode: str = "pool"
    loss_weights: dict = field(default_factory=lambda: {"mlm": 1.0, "itm": 1.0, "itc": 1.0})
    objectives: list = field(default_factory=lambda: ["mlm", "itm", "itc"])
    log_every: int = 100
    precision: str = "float32"
    # model
    d: int = 64
    heads: int = 4
    depths: list = field(default_factory=lambda: [2, 2, 2])
    ffn_mult: int = 4
    pool_size: int = 64
    itc_dim: int = 64
    max_text_len: int = 24
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    # data
    train_manifest: str = ""
    eval_manifest: str = ""
    vocab_path: str = ""

    def validate(self) -> "TrainConfig":
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be non-negative")
        unknown = set(self.objectives) - {"mlm", "itm", "itc"}
        if unknown or not self.objectives:
            raise ConfigError(f"objectives must be a non-empty subset of mlm/itm/itc, got {self.objectives}")
        if "itm" in self.objectives and self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 when ITM is enabled")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.prompt_mode not in ("static", "pool"):
            raise ConfigError(f"prompt_mode must be static or pool, got {self.prompt_mode!r}")
        if self.pooling not in ("average", "max"):
            raise ConfigError(f"pooling must be average or max, got {self.pooling!r}")
        if not 1 <= self.k <= self.pool_size:
            raise ConfigError(f"k must lie in [1, pool_size={self.pool_size}]")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.log_every < 1:
            raise ConfigError("log_every must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        if len(self.depths) != 3 or any(not isinstance(n, int) or n < 1 for n in self.depths):
            raise ConfigError("depths lists three positive layer counts: vision, language, fusion")
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"model width {self.d} must be a positive multiple of heads={self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError("patch_size must divide image_size")
        if set(self.loss_weights) - {"mlm", "itm", "itc"}:
            raise ConfigError(f"unknown loss weight keys {sorted(set(self.loss_weights) - {'mlm', 'itm', 'itc'})}")
        return self

    @property
    def effective_weights(self) -> dict[str, float]:
        """Configured weights with disabled objectives zeroed."""
        base = {"mlm": 1.0, "itm": 1.0, "itc": 1.0, **self.loss_weights}
        return {name: (float(base[name]) if name in self.objectives else 0.0) for name in ("mlm", "itm", "itc")}

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "TrainConfig":
        return _apply(cls(), values).validate()


PAPER_SCALE = {
    "d": 768,
    "heads": 12,
    "depths": [12, 12, 6],
    "pool_size": 1024,
    "image_size": 288,
    "patch_size": 16,
    "total_steps": 100_000,
    "peak_lr_backbone": 1e-5,
    "peak_lr_heads": 5e-5,
}


def _coerce(name: str, value: Any, default: Any) -> Any:
    expected = type(default)
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise ConfigError(f"{name}: expected {expected.__name__}, got {type(value).__name__} ({value!r})")
    return value


def _apply(config: TrainConfig, values: dict[str, Any]) -> TrainConfig:
    known = {f.name for f in dataclasses.fields(config)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    for key, value in values.items():
        setattr(config, key, _coerce(key, value, getattr(config, key)))
    return config


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> TrainConfig:
    """Defaults, then the JSON file, then ``key=value`` overrides."""
    config = TrainConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            values = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{p}: top level must be an object")
        _apply(config, values)
    _apply(config, dict(parse_override(item) for item in overrides))
    return config.validate()
