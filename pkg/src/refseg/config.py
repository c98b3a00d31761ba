"""Run configuration: defaults, INI-style files, and typed overrides.

A config file has sections [decoder] [bar] [loss] [optim] [data] with flat
key=value entries; every key corresponds to a dataclass field and is parsed
with that field's type.  `--set section.key=value` overrides apply on top.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .decoder import DecoderConfig
from .matching import LossWeights
from .model import ModelConfig
from .refine import BarConfig
from .scenes import SceneSpec


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    learning_rate: float = 1e-3   # desk scale; 4e-5 documented for full scale
    weight_decay: float = 0.05
    steps: int = 3000
    batch_size: int = 8   # single-expression passes accumulated per step
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0


@dataclass
class DataConfig:
    image_size: int = 48
    min_objects: int = 2
    max_objects: int = 5
    count: int = 2000

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(image_size=self.image_size,
                         min_objects=self.min_objects,
                         max_objects=self.max_objects)


@dataclass
class RunConfig:
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    bar: BarConfig = field(default_factory=BarConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def model_config(self) -> ModelConfig:
        return ModelConfig(decoder=self.decoder, bar=self.bar)

    def to_dict(self) -> dict:
        return {s: dataclasses.asdict(getattr(self, s)) for s in _SECTIONS}


_SECTIONS = ("decoder", "bar", "loss", "optim", "data")


def _parse_value(raw: str, target_type: type, where: str):
    raw = raw.strip()
    if target_type is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{where}: cannot parse {raw!r} as bool")
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {target_type.__name__}") from None
    if target_type is str:
        return raw
    raise ConfigError(f"{where}: unsupported field type {target_type!r}")


def _apply(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    target = getattr(cfg, section)
    fields = {f.name: f for f in dataclasses.fields(target)}
    if key not in fields:
        raise ConfigError(f"unknown key {section}.{key}")
    current = getattr(target, key)
    value = _parse_value(raw, type(current), f"{section}.{key}")
    setattr(target, key, value)
    if section == "decoder":
        # re-run the dataclass validation hook; its rejections are user input
        # errors here, so surface them as ConfigError
        try:
            target.__post_init__()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from None


def load_config(path: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        if dotted.count(".") != 1:
            raise ConfigError(f"override key {dotted!r} is not of the form section.key")
        section, key = dotted.split(".")
        _apply(cfg, section, key, raw)
    return cfg


def to_ini(cfg: RunConfig) -> str:
    lines = []
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        for f in dataclasses.fields(getattr(cfg, section)):
            lines.append(f"{f.name} = {getattr(getattr(cfg, section), f.name)}")
        lines.append("")
    return "\n".join(lines)
