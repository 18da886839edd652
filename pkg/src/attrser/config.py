"""Experiment configuration: nested dataclasses loaded from YAML with dotted overrides."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .model import ModelConfig


@dataclass
class FeatureParams:
    sample_rate: int = 16000
    num_mel_bins: int = 80
    fft_size: int = 1024
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    target_frames: int = 300
    freq_mask_width: int = 2
    time_mask_width: int = 30
    num_freq_masks: int = 1
    num_time_masks: int = 1
    augment: bool = True


@dataclass
class LossParams:
    s: float = 30.0
    m: float = 0.2


@dataclass
class MSACParams:
    # a named preset (iemocap, emodb, cross_corpus, none) or explicit alpha
    preset: str | None = None
    alpha: dict = field(default_factory=dict)
    roles: dict = field(default_factory=dict)


@dataclass
class OptimParams:
    lr: float = 0.001
    weight_decay: float = 0.01


@dataclass
class DataParams:
    manifest: str = ""
    scheme: object = "iemocap4"
    split: str = "kfold"  # kfold | holdout | plan
    k: int = 10
    folds: list | None = None  # subset of folds to run; None = all
    plan_file: str | None = None
    feature_dir: str | None = None
    split_seed: int | None = None


@dataclass
class DetectorParams:
    kind: str = "maxlogit"
    temperature: float = 1000.0
    eps: float = 0.0014
    percentile: float = 90.0


def _default_detectors():
    return [DetectorParams(k) for k in ("maxlogit", "odin", "rodin", "react", "mahalanobis")]


@dataclass
class ExperimentConfig:
    features: FeatureParams = field(default_factory=FeatureParams)
    model: dict = field(default_factory=dict)  # ModelConfig overrides; heads sized from data
    loss: LossParams = field(default_factory=LossParams)
    msac: MSACParams = field(default_factory=MSACParams)
    optim: OptimParams = field(default_factory=OptimParams)
    data: DataParams = field(default_factory=DataParams)
    detectors: list = field(default_factory=_default_detectors)
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    deterministic: bool = True
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, heads: dict) -> ModelConfig:
        params = dict(self.model)
        params.setdefault("num_mel_bins", self.features.num_mel_bins)
        if params["num_mel_bins"] != self.features.num_mel_bins:
            raise ConfigError("model.num_mel_bins disagrees with features.num_mel_bins")
        params["attribute_heads"] = heads
        return ModelConfig.from_dict(params)


def _build(cls, data, path="config"):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {data!r}")
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key")
        sub = _SECTIONS.get((cls, key))
        if sub is not None:
            kwargs[key] = _build(sub, value, f"{path}.{key}")
        elif cls is ExperimentConfig and key == "detectors":
            kwargs[key] = [_build(DetectorParams, d, f"{path}.detectors[{i}]") for i, d in enumerate(value or [])]
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


_SECTIONS = {
    (ExperimentConfig, "features"): FeatureParams,
    (ExperimentConfig, "loss"): LossParams,
    (ExperimentConfig, "msac"): MSACParams,
    (ExperimentConfig, "optim"): OptimParams,
    (ExperimentConfig, "data"): DataParams,
}


def apply_overrides(data: dict, overrides) -> dict:
    """``["optim.lr=0.01", "msac.alpha.speaker=0.3"]``; values parsed as YAML scalars."""
    data = copy.deepcopy(data)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from None
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a section")
            node = child
        node[parts[-1]] = value
    return data


def config_from_dict(data: dict | None, overrides=None) -> ExperimentConfig:
    return _build(ExperimentConfig, apply_overrides(data or {}, overrides))


def load_config(path: str | Path | None, overrides=None) -> ExperimentConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data, overrides)


def dump_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
