"""Run configuration and the flat ``key=value`` config file format."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from typing import Any, Mapping

from pmlm.model import ModelConfig

OBJECTIVES = ("ae", "ar", "par", "ae+ar", "ae+par")


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 6e-4
    warmup_ratio: float = 0.048
    warmup_steps: int = 0  # > 0 overrides warmup_ratio
    training_steps: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_epsilon: float = 1e-6
    weight_decay: float = 0.01
    gradient_clipping: float = 0.0  # 0 disables
    max_len: int = 64
    seed: int = 0
    checkpoint_every: int = 0  # 0 -> only at the end
    label_smoothing: float = 0.1

    def resolved_warmup(self) -> int:
        if self.warmup_steps > 0:
            return self.warmup_steps
        return int(round(self.warmup_ratio * self.training_steps))

    def validate(self) -> None:
        if self.training_steps < 1 or self.batch_size < 1:
            raise ValueError("training_steps and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.resolved_warmup() > self.training_steps:
            raise ValueError("warmup longer than training")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_epsilon > 0):
            raise ValueError("invalid Adam hyperparameters")
        if self.weight_decay < 0 or self.gradient_clipping < 0:
            raise ValueError("weight_decay and gradient_clipping must be >= 0")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    objective: str = "ae+par"
    tokenizer: str = "word"
    lowercase: bool = True
    max_vocab: int = 30000

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; choose from {OBJECTIVES}")
        self.train.validate()
        if self.train.max_len > self.model.max_positions:
            raise ValueError("max_len exceeds max_positions")

    def to_mapping(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        out.update(self.model.to_dict())
        out.update({f.name: getattr(self.train, f.name) for f in fields(self.train)})
        for name in ("objective", "tokenizer", "lowercase", "max_vocab"):
            out[name] = getattr(self, name)
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.to_mapping().items())

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "RunConfig":
        values = dict(values)
        model_kw = _take(ModelConfig, values)
        train_kw = _take(TrainConfig, values)
        top_kw = _take(cls, values, skip=("model", "train"))
        if values:
            raise ValueError(f"unknown config keys: {', '.join(sorted(values))}")
        return cls(model=ModelConfig(**model_kw), train=TrainConfig(**train_kw), **top_kw)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        return cls.from_mapping(read_key_values(path))

    @classmethod
    def base_size(cls) -> "RunConfig":
        """BASE-size dimensions (12 layers, d=768) with the full-scale optimisation settings."""
        return cls(
            model=ModelConfig(
                layers=12,
                hidden_size=768,
                attention_heads=12,
                attention_head_size=64,
                ffn_inner_hidden_size=3072,
                max_positions=512,
                max_relative_position=128,
            ),
            train=TrainConfig(batch_size=7680, training_steps=500_000, max_len=512),
        )


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(value: Any, like: Any, name: str) -> Any:
    if not isinstance(value, str):
        return value
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(float(value)) if "e" in value.lower() else int(value)
    if isinstance(like, float):
        return float(value)
    return value.strip()


def _take(cls, values: dict[str, Any], skip: tuple[str, ...] = ()) -> dict[str, Any]:
    defaults = cls()
    out = {}
    for f in fields(cls):
        if f.name in skip or f.name not in values:
            continue
        out[f.name] = _coerce(values.pop(f.name), getattr(defaults, f.name), f.name)
    return out


def read_key_values(path: str | os.PathLike) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{os.fspath(path)}:{lineno}: expected key=value")
            out[key.strip()] = value.strip()
    return out
