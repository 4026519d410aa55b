"""Experiment configuration: one validated document with a section per module."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .augmentation import AugmentationPolicy
from .errors import ConfigInvalid
from .losses import LossWeights
from .nets import NetConfig
from .training import DefrontTrainConfig, EmbedTrainConfig


@dataclass
class DataConfig:
    n_identities: int = 64
    poses: tuple[int, ...] = (0, 45, 60, 75, 90)
    size: int = 128
    train_per_identity: int = 16
    train_yaw_sigma: float = 25.0
    n_test_pairs: int | None = None

    def __post_init__(self):
        self.poses = tuple(int(p) for p in self.poses)


@dataclass
class GeometryConfig:
    template: str = "arcface"

    def __post_init__(self):
        if self.template != "arcface":
            raise ValueError("only the arcface template is available")


@dataclass
class TrainingConfig:
    defront: DefrontTrainConfig = field(default_factory=lambda: DefrontTrainConfig(epochs=3, flow_epochs=5))
    embed: EmbedTrainConfig = field(default_factory=lambda: EmbedTrainConfig(epochs=8, batch_size=32, accumulation_steps=1))


@dataclass
class EvaluationConfig:
    iterations: int = 100
    warmup: int = 10
    csv: bool = True


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    nets: NetConfig = field(default_factory=NetConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    seed: int = 0
    out: str = "runs/default"

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=list))

    def defront_config(self) -> DefrontTrainConfig:
        d = asdict(self.training.defront)
        d["weights"] = self.losses
        d["seed"] = self.seed
        return DefrontTrainConfig(**d)

    def embed_config(self, policy: AugmentationPolicy) -> EmbedTrainConfig:
        d = asdict(self.training.embed)
        d["policy"] = policy
        d["seed"] = self.seed
        return EmbedTrainConfig(**d)


_SECTIONS = {
    "data": DataConfig,
    "geometry": GeometryConfig,
    "nets": NetConfig,
    "losses": LossWeights,
    "augmentation": AugmentationPolicy,
    "evaluation": EvaluationConfig,
}
_TRAINING = {"defront": DefrontTrainConfig, "embed": EmbedTrainConfig}


def _build(cls, raw: Any, where: str, base=None):
    if raw is None:
        return base if base is not None else cls()
    if not isinstance(raw, Mapping):
        raise ConfigInvalid(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigInvalid(f"unknown key(s) in {where}: {', '.join(unknown)}")
    values = asdict(base) if base is not None else {}
    values.update(raw)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"invalid {where}: {exc}") from exc


def config_from_dict(raw: Mapping | None) -> ExperimentConfig:
    raw = dict(raw or {})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigInvalid(f"unknown top-level key(s): {', '.join(unknown)}")
    default = ExperimentConfig()
    kw = {name: _build(cls, raw.get(name), name, getattr(default, name)) for name, cls in _SECTIONS.items()}
    tr = raw.get("training") or {}
    if not isinstance(tr, Mapping):
        raise ConfigInvalid("training must be a mapping")
    bad = sorted(set(tr) - set(_TRAINING))
    if bad:
        raise ConfigInvalid(f"unknown key(s) in training: {', '.join(bad)}")
    kw["training"] = TrainingConfig(
        **{k: _build(cls, tr.get(k), f"training.{k}", getattr(default.training, k)) for k, cls in _TRAINING.items()}
    )
    try:
        kw["seed"] = int(raw.get("seed", default.seed))
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"seed must be an integer: {exc}") from exc
    kw["out"] = str(raw.get("out", default.out))
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    """Read a YAML or JSON experiment config; unknown keys are rejected."""
    p = Path(path)
    if not p.exists():
        raise ConfigInvalid(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    try:
        raw = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigInvalid(f"cannot parse {p}: {exc}") from exc
    return config_from_dict(raw)
