"""Experiment configuration: a YAML tree mirroring the dataclass tree.

Parsing is strict: unknown keys anywhere in the tree are collected and
reported together. Radii may be written as fraction strings ("8/255")
wherever a real number is expected. CLI overrides address fields by
dotted path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adversary import AttackConfig, RadiusSchedule
from .data import DatasetConfig
from .pyramid import PyramidSpec
from .training import TrainConfig

_FRACTION = re.compile(r"^\s*(-?\d+(?:\.\d+)?)\s*/\s*(\d+(?:\.\d+)?)\s*$")


class ConfigError(Exception):
    pass


def parse_real(value, where: str = "value") -> float:
    """Float, int, or a fraction string like '8/255'."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a real number, got a boolean")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        m = _FRACTION.match(value)
        if m:
            return float(m.group(1)) / float(m.group(2))
        try:
            return float(value)
        except ValueError:
            pass
    raise ConfigError(f"{where}: cannot interpret {value!r} as a real number")


@dataclass(frozen=True)
class RunConfig:
    output_dir: str = "runs"
    run_id: str | None = None
    checkpoint_every: int = 0
    strength_eval_every: int = 0


@dataclass(frozen=True)
class EvalConfig:
    corruption_severities: tuple[int, ...] = (1, 2, 3)
    landscape_grid: int = 21
    landscape_span: float = 1.0
    landscape_samples: int = 512
    batch_size: int = 256


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _coerce(value, hint, where: str, errors: list[str]):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or origin is types.UnionType:
        if value is None:
            if type(None) in args:
                return None
            errors.append(f"{where}: null is not allowed")
            return None
        non_none = [a for a in args if a is not type(None)]
        return _coerce(value, non_none[0], where, errors)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            errors.append(f"{where}: expected a mapping")
            return None
        return _from_dict(hint, value, where, errors)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            errors.append(f"{where}: expected a list")
            return ()
        elem = args[0]
        return tuple(_coerce(v, elem, f"{where}[{i}]", errors) for i, v in enumerate(value))
    if hint is float:
        try:
            return parse_real(value, where)
        except ConfigError as err:
            errors.append(str(err))
            return 0.0
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{where}: expected an integer, got {value!r}")
            return 0
        return value
    if hint is bool:
        if not isinstance(value, bool):
            errors.append(f"{where}: expected a boolean, got {value!r}")
            return False
        return value
    if hint is str:
        if not isinstance(value, str):
            errors.append(f"{where}: expected a string, got {value!r}")
            return ""
        return value
    if hint is dict:
        if not isinstance(value, dict):
            errors.append(f"{where}: expected a mapping, got {value!r}")
            return {}
        return value
    errors.append(f"{where}: unsupported config field type {hint}")
    return None


def _from_dict(cls, data: dict, where: str, errors: list[str]):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            errors.append(f"unknown config key: {where + '.' if where else ''}{key}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            path = f"{where + '.' if where else ''}{f.name}"
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], path, errors)
    if errors:
        return None
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as err:
        errors.append(f"{where or 'config'}: {err}")
        return None


def config_from_dict(data: dict) -> ExperimentConfig:
    errors: list[str] = []
    cfg = _from_dict(ExperimentConfig, data or {}, "", errors)
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(sorted(errors)))
    return cfg


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _plain(cfg)


def serialize_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False)


def parse_config(text: str) -> ExperimentConfig:
    data = yaml.safe_load(text)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a mapping at the top level")
    return config_from_dict(data)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply 'dotted.path=value' overrides onto a nested dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        if not all(keys):
            raise ConfigError(f"override {item!r} has an empty path segment")
        node = data
        for k in keys[:-1]:
            nxt = node.get(k)
            if nxt is None:
                nxt = node[k] = {}
            elif not isinstance(nxt, dict):
                raise ConfigError(f"override {path!r}: {k!r} is not a section")
            node = nxt
        node[keys[-1]] = yaml.safe_load(raw)
    return data


def load_experiment_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = loaded
    if overrides:
        data = apply_overrides(data, overrides)
    return config_from_dict(data)


def config_hash(cfg: ExperimentConfig) -> str:
    """Content hash over everything except the run bookkeeping section."""
    payload = config_to_dict(cfg)
    payload.pop("run", None)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:8]


def default_run_id(cfg: ExperimentConfig) -> str:
    return f"{cfg.training.method}-{config_hash(cfg)}-s{cfg.training.seed}"


def with_radius(cfg: ExperimentConfig, radius: float) -> ExperimentConfig:
    """Consistently retarget the attack radius and the schedule endpoints
    (end radius stays at 10% of the start)."""
    spec = dataclasses.replace(cfg.training.attack.spec, radius=radius)
    attack = dataclasses.replace(cfg.training.attack, spec=spec)
    schedule = dataclasses.replace(cfg.training.schedule, r_start=radius, r_end=0.1 * radius)
    training = dataclasses.replace(cfg.training, attack=attack, schedule=schedule)
    return dataclasses.replace(cfg, training=training)


def replace_training(cfg: ExperimentConfig, **kwargs) -> ExperimentConfig:
    return dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, **kwargs))
