"""Run configuration: a strict YAML file mapped onto the library's
dataclasses, with flag overrides layered on top.

Precedence is flags > config file > dataclass defaults.  Unknown keys
anywhere in the file are an error — silent typos in experiment configs
are how results stop being reproducible.  Every command that writes
outputs re-emits the fully resolved configuration next to them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .data import DomainShift, SceneGenConfig
from .model import ArchSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataPaths:
    source: str = "data/source"
    target_train: str = "data/target_train"
    target_val: str = "data/target_val"


@dataclass
class OutputSpec:
    root: str = "runs"
    tag: str = "run"


@dataclass
class RunConfig:
    arch: ArchSpec = field(default_factory=ArchSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    scenes: SceneGenConfig = field(default_factory=SceneGenConfig)
    paths: DataPaths = field(default_factory=DataPaths)
    output: OutputSpec = field(default_factory=OutputSpec)

    @property
    def run_dir(self) -> Path:
        """Per-run directory keyed by user tag and seed: no two configs
        that differ in either can clobber each other's outputs."""
        return Path(self.output.root) / f"{self.output.tag}-seed{self.train.seed}"


_LAYER_FIELDS = {"base_layers", "branch_layers"}
_NESTED_FIELDS = {"source_shift": DomainShift, "target_shift": DomainShift}


def _coerce(name: str, value: Any, where: str) -> Any:
    if name in _LAYER_FIELDS:
        try:
            return tuple(tuple(int(x) for x in layer) for layer in value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}.{name}: expected a list of [channels, kernel, dilation] triples")
    return value


def _build(cls, mapping: Mapping[str, Any], where: str):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, Mapping):
        raise ConfigError(f"{where}: expected a mapping, got {type(mapping).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in mapping.items():
        if key in _NESTED_FIELDS:
            kwargs[key] = _build(_NESTED_FIELDS[key], value, f"{where}.{key}")
        else:
            kwargs[key] = _coerce(key, value, where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTIONS = {
    "arch": ArchSpec,
    "train": TrainConfig,
    "scenes": SceneGenConfig,
    "paths": DataPaths,
    "output": OutputSpec,
}


def config_from_mapping(raw: Mapping[str, Any]) -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"config root: expected a mapping, got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"config root: unknown section(s) {', '.join(unknown)}")
    return RunConfig(**{
        name: _build(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()
    })


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return config_from_mapping(raw)


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Layer dotted-path overrides (e.g. ``train.seed``) over a config.
    ``None`` values mean "flag not given" and are skipped."""
    cfg = dataclasses.replace(cfg)
    for dotted, value in overrides.items():
        if value is None:
            continue
        section_name, _, leaf = dotted.partition(".")
        section = getattr(cfg, section_name)
        if not hasattr(section, leaf):
            raise ConfigError(f"unknown override {dotted}")
        updated = dataclasses.replace(section, **{leaf: _coerce(leaf, value, section_name)})
        setattr(cfg, section_name, updated)
    return cfg


def _as_plain(obj) -> Any:
    if is_dataclass(obj):
        return {f.name: _as_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_as_plain(v) for v in obj]
    return obj


def dump_config(cfg: RunConfig) -> str:
    """The fully resolved configuration as YAML; loading it back yields
    an identical RunConfig."""
    return yaml.safe_dump(_as_plain(cfg), sort_keys=False)


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.yaml"
    path.write_text(dump_config(cfg))
    return path
