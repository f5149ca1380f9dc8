"""Flat text run configuration with dotted section keys.

One ``key value`` pair per line; sections ``model.``, ``train.``, ``data.``
map onto the corresponding config dataclasses. Unknown keys, duplicate keys,
and malformed values are all hard errors: a config must parse completely
before any work starts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .model import ModelConfig
from .train import TrainConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class DataConfig:
    tiles: int = 80
    tile_size: int = 256
    patch: int = 256
    train_stride: int = 256
    test_stride: int = 256
    seed: int = 7
    n_test: int = 0   # 0 = one quarter of the tiles

    def __post_init__(self):
        if self.tiles < 2 or self.tile_size < 32:
            raise ValueError("need at least 2 tiles of size >= 32")
        if not 0 < self.patch <= self.tile_size:
            raise ValueError(f"patch {self.patch} must fit tile {self.tile_size}")
        if self.train_stride < 1 or self.test_stride < 1:
            raise ValueError("strides must be positive")

    def test_count(self) -> int:
        return self.n_test if self.n_test else max(1, self.tiles // 4)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def _coerce(section: str, field: dataclasses.Field, text: str):
    kind = field.default
    try:
        if isinstance(kind, bool):
            if text not in ("true", "false"):
                raise ValueError("expected true/false")
            return text == "true"
        if isinstance(kind, int):
            return int(text)
        if isinstance(kind, float):
            return float(text)
        if isinstance(kind, tuple):
            return tuple(int(v) for v in text.split(",") if v != "")
    except ValueError as e:
        raise ConfigError(
            f"{section}.{field.name}: bad value {text!r} ({e})") from None
    raise ConfigError(f"{section}.{field.name}: unsupported field type")


def parse_config(text: str) -> RunConfig:
    fields = {name: {f.name: f for f in dataclasses.fields(cls)}
              for name, cls in _SECTIONS.items()}
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        section, _, name = key.partition(".")
        if section not in _SECTIONS or name not in fields[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if name in values[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[section][name] = _coerce(section, fields[section][name], rest.strip())
    try:
        return RunConfig(**{name: cls(**values[name])
                            for name, cls in _SECTIONS.items()})
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
