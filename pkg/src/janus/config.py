"""Flat ``section.key = value`` run configuration with typed overrides."""

from __future__ import annotations

import json
import os
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .encoder import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    # "synth:<kind>" or a FASTA path
    corpus: str = "synth:markov3"
    synth_records: int = 64
    synth_length: int = 1024
    synth_seed: int = 0
    test: str = "synth:markov3"
    test_records: int = 1920
    test_seed: int = 1


@dataclass
class EvalConfig:
    every: int = 500


@dataclass
class FinetuneConfig:
    epochs: int = 10
    lr: float = 3e-3
    batch_size: int = 16
    backbone_lr_scale: float = 0.1
    patience: int = 3
    seed: int = 0


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
    "finetune": FinetuneConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def flat(self) -> dict[str, object]:
        out = {}
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                out[f"{section}.{f.name}"] = getattr(obj, f.name)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.flat().items())

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(
            replace(self.model, seed=seed),
            replace(self.train, seed=seed),
            self.data,
            self.eval,
            replace(self.finetune, seed=seed),
        )


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _field_types(cls) -> dict[str, object]:
    return typing.get_type_hints(cls)


def parse_value(raw: str, annotation, key: str):
    """Parse ``raw`` against a field annotation (int, float, str, bool, optional)."""
    raw = raw.strip()
    args = typing.get_args(annotation)
    if args and type(None) in args:
        if raw.lower() in ("none", "null", ""):
            return None
        annotation = next(a for a in args if a is not type(None))
    try:
        if annotation is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        if annotation is str:
            return raw
    except ValueError:
        pass
    else:
        raise ConfigError(f"{key}: unsupported field type {annotation}")
    name = getattr(annotation, "__name__", str(annotation))
    raise ConfigError(f"{key}: cannot parse {raw!r} as {name}")


def _split_key(key: str) -> tuple[str, str]:
    section, _, name = key.strip().partition(".")
    if section not in SECTIONS or not name:
        raise ConfigError(f"unknown config key {key!r}")
    if name not in _field_types(SECTIONS[section]):
        raise ConfigError(f"unknown config key {key!r}")
    return section, name


def apply(values: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """New RunConfig with raw string ``values`` parsed onto ``base``."""
    base = base or RunConfig()
    updates: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, raw in values.items():
        section, name = _split_key(key)
        updates[section][name] = parse_value(raw, _field_types(SECTIONS[section])[name], key)
    out = {}
    for section in SECTIONS:
        try:
            out[section] = replace(getattr(base, section), **updates[section])
        except ValueError as exc:
            raise ConfigError(f"{section}: {exc}") from None
    return RunConfig(**out)


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        try:
            _split_key(key)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
        values[key] = raw.strip()
    return values


def load(path) -> dict[str, str]:
    """Raw values from a ``.cfg`` text file or from a run manifest (JSON)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        try:
            flat = json.loads(text)["config"]
        except (json.JSONDecodeError, KeyError, TypeError):
            flat = None
        if not isinstance(flat, dict):
            raise ConfigError(f"{path}: not a run manifest with a config snapshot")
        return {k: _format(v) for k, v in flat.items()}
    return parse_text(text, str(path))


def parse_override(item: str) -> tuple[str, str]:
    key, sep, raw = item.partition("=")
    if not sep:
        raise ConfigError(f"override {item!r} is not key=value")
    _split_key(key)
    return key.strip(), raw


def resolve(path=None, overrides=(), seed: int | None = None, env=None) -> RunConfig:
    """File values, then JANUS_SEED, then explicit overrides and the seed flag."""
    env = os.environ if env is None else env
    cfg = apply(load(path)) if path else RunConfig()
    if env.get("JANUS_SEED"):
        try:
            cfg = cfg.with_seed(int(env["JANUS_SEED"]))
        except ValueError:
            raise ConfigError(f"JANUS_SEED: cannot parse {env['JANUS_SEED']!r} as int") from None
    cfg = apply(dict(parse_override(o) for o in overrides), cfg)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg
