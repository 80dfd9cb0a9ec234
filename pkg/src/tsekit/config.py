"""Experiment configuration: one JSON file mapping every knob, with strict
key checking and a canonical hash embedded in all artifacts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .audio import StftConfig, default_band_plan
from .corpus import CorpusConfig
from .model import ModelConfig
from .train import PretrainConfig, TrainConfig
from .util import config_hash


class ConfigError(Exception):
    """Unknown keys, malformed values, or inconsistent settings."""


@dataclass(frozen=True)
class ModelDims:
    embed_dim: int = 32
    hidden_dim: int = 64
    feat_dim: int = 32
    depth: int = 2


@dataclass
class ExperimentConfig:
    master_seed: int = 0
    out_dir: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    model: ModelDims = field(default_factory=ModelDims)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def model_config(self) -> ModelConfig:
        return ModelConfig(stft=self.stft,
                           band_plan=default_band_plan(self.stft.bins),
                           embed_dim=self.model.embed_dim,
                           hidden_dim=self.model.hidden_dim,
                           feat_dim=self.model.feat_dim,
                           depth=self.model.depth,
                           n_speakers=self.corpus.train_speakers)

    def to_dict(self) -> dict:
        def section(obj):
            return {f.name: getattr(obj, f.name) for f in fields(obj)}
        return {"master_seed": self.master_seed,
                "corpus": section(self.corpus),
                "stft": section(self.stft),
                "model": section(self.model),
                "train": section(self.train),
                "pretrain": section(self.pretrain)}

    def hash(self) -> str:
        # out_dir is a location, not an experiment parameter
        return config_hash(self.to_dict())

    @property
    def corpus_dir(self) -> Path:
        return Path(self.out_dir) / "corpus"


_SECTIONS = {"corpus": CorpusConfig, "stft": StftConfig, "model": ModelDims,
             "train": TrainConfig, "pretrain": PretrainConfig}


def _build_section(cls, data: dict, name: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid section {name!r}: {e}") from e


def load_experiment(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Load a JSON experiment file; `overrides` maps dotted keys (for
    example "train.epochs") to replacement values."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for key, value in (overrides or {}).items():
        section, _, leaf = key.partition(".")
        if leaf:
            data.setdefault(section, {})[leaf] = value
        else:
            data[section] = value

    unknown = set(data) - (set(_SECTIONS) | {"master_seed", "out_dir"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = ExperimentConfig(master_seed=int(data.get("master_seed", 0)),
                           out_dir=str(data.get("out_dir", "runs/default")))
    for name, cls in _SECTIONS.items():
        if name in data:
            if not isinstance(data[name], dict):
                raise ConfigError(f"section {name!r} must be an object")
            setattr(cfg, name, _build_section(cls, data[name], name))
    if "train" not in data or "seed" not in data.get("train", {}):
        # training seed follows the master seed unless pinned explicitly
        cfg.train = _build_section(
            TrainConfig,
            {**{f.name: getattr(cfg.train, f.name) for f in fields(TrainConfig)},
             "seed": cfg.master_seed}, "train")
    if "pretrain" not in data or "seed" not in data.get("pretrain", {}):
        cfg.pretrain = _build_section(
            PretrainConfig,
            {**{f.name: getattr(cfg.pretrain, f.name) for f in fields(PretrainConfig)},
             "seed": cfg.master_seed}, "pretrain")
    return cfg
