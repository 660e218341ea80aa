"""Typed configuration records and their YAML/JSON file format.

Files carry ``schema_version``; unknown keys anywhere are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass
from pathlib import Path

import yaml

from ..augment import CopyPasteSpec, PhotometricSpec
from ..errors import ConfigError
from ..evalkit import MatchCriteria
from ..losses import LossConfig
from ..net import NetConfig
from ..simgen import DatasetConfig

SCHEMA_VERSION = 1
MODES = ("wbce", "wbce+dclr", "wbce+consistency", "ref-def")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    steps: int = 1000
    batch_size: int = 8


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "wbce"
    manifest: str = ""
    net: NetConfig = NetConfig()
    loss: LossConfig = LossConfig()
    optim: OptimConfig = OptimConfig()
    copy_paste: CopyPasteSpec = CopyPasteSpec()
    photometric: PhotometricSpec = PhotometricSpec()
    clean_fraction: float = 0.25
    seed: int = 0
    checkpoint_every: int = 0
    out_dir: str = "runs/train"

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.clean_fraction < 1:
            raise ConfigError(f"clean_fraction must lie in [0, 1), got {self.clean_fraction}")
        if self.optim.batch_size < 1 or self.optim.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if self.mode == "wbce+dclr" and self.optim.batch_size < 2:
            raise ConfigError("mode 'wbce+dclr' needs batch_size >= 2: dense contrastive loss requires >=2 samples per batch")
        want_channels = 2 if self.mode == "ref-def" else 1
        if self.net.in_channels != want_channels:
            raise ConfigError(f"mode {self.mode!r} needs net.in_channels == {want_channels}")
        self.net.validate()
        self.loss.validate()
        self.photometric.validate()
        self.copy_paste.validate()
        return self

    def effective_loss(self) -> LossConfig:
        """Loss config with the terms this mode does not use switched off."""
        return dataclasses.replace(
            self.loss,
            lambda_clr=self.loss.lambda_clr if self.mode == "wbce+dclr" else 0.0,
            lambda_cons=self.loss.lambda_cons if self.mode == "wbce+consistency" else 0.0,
        )


@dataclass(frozen=True)
class DetectConfig:
    threshold: float = 0.5
    min_area: int = 4


@dataclass(frozen=True)
class ClassicConfig:
    k_sigma: float = 5.0
    min_area: int = 4
    lowpass_sigma: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    out_dir: str = "runs/experiment"
    dataset: DatasetConfig = DatasetConfig()
    train: TrainConfig = TrainConfig()
    modes: tuple[str, ...] = ("wbce",)
    detect: DetectConfig = DetectConfig()
    classic: ClassicConfig = ClassicConfig()
    match: MatchCriteria = MatchCriteria()
    pr_grid: tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(1, 20))
    run_baseline: bool = True

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}; expected {SCHEMA_VERSION}")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}; choose from {MODES}")
        self.dataset.validate()
        self.match.validate()
        return self


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return build_dataclass(tp, value, where)
    if origin is tuple and isinstance(value, (list, tuple)):
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp in (int, float) and not isinstance(value, bool):
        # YAML 1.1 reads "5e-4" as a string
        try:
            num = tp(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where.rstrip('.')}: expected {tp.__name__}, got {value!r}") from None
        if tp is int and num != value and not (isinstance(value, str) and str(num) == value.strip()):
            raise ConfigError(f"{where.rstrip('.')}: expected int, got {value!r}")
        return num
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, where)
    return value


def build_dataclass(cls, data: dict, where: str = ""):
    """Instantiate ``cls`` from nested dicts, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}{k}.") for k, v in data.items()}
    return cls(**kwargs)


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def digest(cfg) -> str:
    return hashlib.sha256(json.dumps(to_dict(cfg), sort_keys=True).encode()).hexdigest()


def parse_override(text: str):
    """``a.b.c=value`` -> (["a", "b", "c"], parsed value). Values are parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(data: dict, overrides) -> dict:
    data = json.loads(json.dumps(data))
    for text in overrides or ():
        path, value = parse_override(text)
        node = data
        for k in path[:-1]:
            node = node.setdefault(k, {})
        node[path[-1]] = value
    return data


def load_config(path, cls=ExperimentConfig, overrides=()):
    """Read a YAML/JSON config file into ``cls`` after applying ``key=value`` overrides."""
    data = (yaml.safe_load(Path(path).read_text()) or {}) if path else {}
    data = apply_overrides(data, overrides)
    cfg = build_dataclass(cls, data)
    return cfg.validate() if hasattr(cfg, "validate") else cfg


def save_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))


__all__ = [
    "OptimConfig",
    "TrainConfig",
    "DetectConfig",
    "ClassicConfig",
    "ExperimentConfig",
    "load_config",
    "save_config",
    "build_dataclass",
    "digest",
]
