"""One JSON run configuration covering every pipeline stage.

A config file holds any subset of the known sections; missing keys default.
Unknown sections or keys are rejected. Command-line overrides use dotted
keys, e.g. ``--set train.epochs=10``; values are parsed as JSON with a
plain-string fallback.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigError, IoError
from .evaluation import EvalConfig
from .heads import AssignmentConfig, DecodeConfig
from .postprocess import NmsConfig
from .synth import SynthConfig
from .training import TrainConfig


@dataclass
class PathsConfig:
    data_dir: str | None = None
    checkpoint: str | None = None
    output: str | None = None


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    assignment: AssignmentConfig = field(default_factory=AssignmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    nms: NmsConfig = field(default_factory=NmsConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        self.synth.validate()
        self.encoder.validate()
        self.assignment.validate()
        self.train.validate()
        self.nms.validate()
        self.decode.validate()
        self.eval.validate()
        return self

    def to_dict(self) -> dict:
        return {
            name: dataclasses.asdict(getattr(self, name))
            for name in _SECTION_TYPES
        }


_SECTION_TYPES = {
    "synth": SynthConfig,
    "encoder": EncoderConfig,
    "assignment": AssignmentConfig,
    "train": TrainConfig,
    "nms": NmsConfig,
    "decode": DecodeConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}


def _coerce(section: str, name: str, declared_type, value):
    """Best-effort conversion of JSON values onto dataclass field types."""
    if value is None:
        return None
    if declared_type in (int, "int"):
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ConfigError(f"{section}.{name} expects an integer, got {value!r}")
        return int(value)
    if declared_type in (float, "float"):
        if isinstance(value, bool):
            raise ConfigError(f"{section}.{name} expects a number, got {value!r}")
        return float(value)
    if declared_type in (bool, "bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{name} expects a boolean, got {value!r}")
        return value
    if declared_type in (str, "str"):
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{name} expects a string, got {value!r}")
        return value
    return value


_OPTIONAL_INTS = {("encoder", "attn_dim"), ("encoder", "attention_window"), ("encoder", "ssm_chunk")}
_OPTIONAL_STRS = {("paths", "data_dir"), ("paths", "checkpoint"), ("paths", "output")}


def _set_field(obj, section: str, name: str, value):
    declared = {f.name: f.type for f in fields(obj)}
    if name not in declared:
        raise ConfigError(f"unknown config key {section}.{name}")
    ftype = declared[name]
    if (section, name) in _OPTIONAL_INTS:
        value = None if value is None else _coerce(section, name, int, value)
    elif (section, name) in _OPTIONAL_STRS:
        value = None if value is None else _coerce(section, name, str, value)
    elif section == "eval" and name == "recall_at":
        if not isinstance(value, list):
            raise ConfigError("eval.recall_at expects a list of [k, tiou] pairs")
        value = [(int(k), float(t)) for k, t in value]
    elif section == "eval" and name == "thresholds":
        if not isinstance(value, list):
            raise ConfigError("eval.thresholds expects a list")
        value = [float(v) for v in value]
    else:
        current = getattr(obj, name)
        base = type(current) if current is not None else str
        value = _coerce(section, name, base, value)
    setattr(obj, name, value)


def default_run_config() -> RunConfig:
    return RunConfig()


def run_config_from_dict(doc: dict) -> RunConfig:
    cfg = RunConfig()
    for section, entries in doc.items():
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(entries, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for name, value in entries.items():
            _set_field(getattr(cfg, section), section, name, value)
    return cfg


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, name = parts
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section {section!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_field(getattr(cfg, section), section, name, value)
    return cfg


def load_run_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    if path is None:
        cfg = default_run_config()
    else:
        try:
            with open(path, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        cfg = run_config_from_dict(doc)
    apply_overrides(cfg, overrides or [])
    return cfg.validate()


def save_run_config(path: str | Path, cfg: RunConfig) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write config {path}: {exc}") from exc


def config_help_text() -> str:
    """All config keys with their defaults, for subcommand --help output."""
    cfg = RunConfig()
    lines = ["configuration keys (JSON sections or --set section.key=value):"]
    for section in _SECTION_TYPES:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"  {section}.{f.name} = {getattr(obj, f.name)!r}")
    return "\n".join(lines)
