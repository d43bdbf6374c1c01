"""Experiment configuration: one TOML or JSON document, strictly validated.

Layout::

    schema_version = 1
    run_dir = "runs/toy"
    dump_embeddings = false
    [train]     # TrainConfig fields
    [teacher]   # preset = "small-teacher"  or  spec = {...BackboneSpec...}
    [student]
    [data]      # DatasetSpec fields
    [verify]
    [ablation]
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .data import DataError, DatasetSpec
from .nn import BackboneSpec, SpecError, preset
from .trainer import ConfigError, TrainConfig

SCHEMA_VERSION = 1
SNAPSHOT_NAME = "config.snapshot"


@dataclass
class ModelConfig:
    preset: Optional[str] = None
    spec: Optional[dict] = None
    reduce_channels: Optional[int] = None

    def __post_init__(self):
        if (self.preset is None) == (self.spec is None):
            raise ConfigError("a model section needs exactly one of 'preset' or 'spec'")

    def backbone_spec(self, num_classes: int, in_channels: int, resolution: int) -> BackboneSpec:
        if self.preset is not None:
            return preset(self.preset, num_classes, in_channels, resolution)
        spec = BackboneSpec.from_dict(self.spec)
        if (spec.num_classes, spec.in_channels, spec.input_resolution) != (num_classes, in_channels, resolution):
            raise ConfigError(
                f"model spec expects {spec.in_channels}x{spec.input_resolution}px inputs and "
                f"{spec.num_classes} classes; data provides {in_channels}x{resolution}px and {num_classes}")
        return spec


@dataclass
class VerifyConfig:
    gradcheck: bool = True
    oracles: bool = True
    determinism: bool = True
    smoke: bool = True
    oracle_trials: int = 100
    smoke_epochs: int = 3


@dataclass
class AblationConfig:
    pair_sweep: bool = False
    pretrain_epochs: Optional[int] = None


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    teacher: ModelConfig = field(default_factory=lambda: ModelConfig(preset="small-teacher"))
    student: ModelConfig = field(default_factory=lambda: ModelConfig(preset="small-student"))
    data: DatasetSpec = field(default_factory=DatasetSpec)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    run_dir: str = "runs/default"
    dump_embeddings: bool = False
    schema_version: int = SCHEMA_VERSION

    def model_spec(self, role: str) -> BackboneSpec:
        m = self.teacher if role == "teacher" else self.student
        return m.backbone_spec(self.data.num_classes, self.data.channels, self.data.effective_resolution)

    def to_dict(self) -> dict:
        return _drop_none(dataclasses.asdict(self))


SECTIONS = {
    "train": TrainConfig,
    "teacher": ModelConfig,
    "student": ModelConfig,
    "data": DatasetSpec,
    "verify": VerifyConfig,
    "ablation": AblationConfig,
}
TOP_LEVEL = {"schema_version", "run_dir", "dump_embeddings"} | set(SECTIONS)


def _drop_none(obj):
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_drop_none(v) for v in obj]
    return obj


def _build(cls, name: str, values):
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, DataError, SpecError) as e:
        raise ConfigError(f"[{name}]: {e}") from None


def from_dict(doc: dict) -> ExperimentConfig:
    unknown = sorted(set(doc) - TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    kwargs = {k: _build(cls, k, doc[k]) for k, cls in SECTIONS.items() if k in doc}
    for k in ("run_dir", "dump_embeddings"):
        if k in doc:
            kwargs[k] = doc[k]
    return ExperimentConfig(**kwargs)


def loads(text: str, fmt: str = "toml") -> ExperimentConfig:
    try:
        doc = json.loads(text) if fmt == "json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot parse {fmt} config: {e}") from None
    return from_dict(doc)


def load(path) -> ExperimentConfig:
    """Read a config; ``.json`` files are JSON, anything else is TOML."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return loads(text, "json" if path.suffix.lower() == ".json" else "toml")


def dumps(config: ExperimentConfig) -> str:
    return tomli_w.dumps(config.to_dict())


def write_snapshot(config: ExperimentConfig, run_dir) -> Path:
    path = Path(run_dir) / SNAPSHOT_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(config))
    return path
