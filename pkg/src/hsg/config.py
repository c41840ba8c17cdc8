"""Run configuration: defaults, ``key=value`` files, command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .losses import LossConfig
from .multiview import AugConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    corpus: str = "corpus"
    epochs: int = 10
    max_steps: int = 0
    batch_size: int = 4
    views: int = 3
    anchors: int = 256
    m: int = 128
    grid_rows: int = 4
    grid_cols: int = 4
    kmeans_iters: int = 15
    region_target: int = 12
    levels: tuple = (8, 4)
    temperature: float = 1.0 / 16
    lambda_e: float = 1.0
    lambda_f: float = 0.1
    lambda_g: float = 0.2
    k_affinity: int = 2
    lr: float = 0.1
    lr_decay: float = 0.1
    weight_decay: float = 1e-4
    knn_k: int = 5
    view_size: int = 32
    crop_min: float = 0.5
    crop_max: float = 1.0
    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    gray_prob: float = 0.1
    blur_prob: float = 0.2
    min_overlap: float = 0.25
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.levels = tuple(int(n) for n in self.levels)
        self.validate()

    def validate(self):
        counts = ("epochs", "batch_size", "views", "anchors", "m", "grid_rows", "grid_cols",
                  "kmeans_iters", "region_target", "k_affinity", "knn_k")
        for name in counts:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        n0 = self.grid_rows * self.grid_cols
        prev = n0
        for n in self.levels:
            if not 0 < n < prev:
                raise ConfigError(f"levels {self.levels} must strictly decrease below n0={n0}")
            prev = n
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        self.loss_config()

    def loss_config(self) -> LossConfig:
        try:
            return LossConfig(self.temperature, self.lambda_e, self.lambda_f, self.lambda_g,
                              self.k_affinity)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def aug_config(self) -> AugConfig:
        return AugConfig(view_size=self.view_size, crop_min=self.crop_min, crop_max=self.crop_max,
                         flip_prob=self.flip_prob, brightness=self.brightness,
                         contrast=self.contrast, saturation=self.saturation,
                         gray_prob=self.gray_prob, blur_prob=self.blur_prob,
                         min_overlap=self.min_overlap)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "extra"}
        out["levels"] = list(self.levels)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        return cls().updated(values)

    def updated(self, values: dict) -> "RunConfig":
        current = self.to_dict()
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in current:
                raise ConfigError(f"unknown config key {key!r}")
            current[key] = _coerce(key, raw, current[key])
        try:
            return RunConfig(**current)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def total_steps(self, n_train: int) -> int:
        return self.epochs * max(1, n_train // self.batch_size)


def _coerce(key, raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(Fraction(text))
        if isinstance(default, (list, tuple)):
            return tuple(int(t) for t in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return text


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    values.update(overrides or {})
    return RunConfig().updated(values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
