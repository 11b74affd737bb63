"""Experiment configuration files.

Configs are YAML documents mirroring :class:`ExperimentConfig`. Every section
is optional, but unknown keys anywhere are an error, so a typo never silently
falls back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Tuple

import yaml

from .datastream import PIPELINES, CollisionSpec, SplitSpec

OUTPUT_ROOT_ENV = "TAGFEX_OUTPUT_ROOT"

__all__ = ["OUTPUT_ROOT_ENV", "ConfigError", "DatasetConfig", "BackboneConfig",
           "OptimizerConfig", "LossConfig", "SSLConfig", "MergeConfig", "AblationConfig",
           "AnalysisConfig", "ExperimentConfig", "config_from_dict", "load_config", "dump_config", "config_hash",
           "default_output_dir", "ablation_matrix"]


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    name: str = "collision"               # "collision" or "directory"
    path: Optional[str] = None            # dataset directory for name == "directory"
    total_classes: int = 4
    base_size: int = 2
    increment_size: int = 2
    class_order_seed: int = 1993
    data_seed: int = 0
    train_per_class: int = 100            # collision only
    test_per_class: int = 100             # collision only
    collision: dict = field(default_factory=dict)   # extra CollisionSpec fields

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.total_classes, self.base_size, self.increment_size,
                         self.class_order_seed)

    def collision_spec(self, samples_per_class: int) -> CollisionSpec:
        def tup(v):
            return tuple(tup(x) for x in v) if isinstance(v, (list, tuple)) else v
        unknown = sorted(set(self.collision) - {f.name for f in fields(CollisionSpec)})
        if unknown or "samples_per_class" in self.collision:
            raise ConfigError(f"unknown key(s) in dataset.collision: "
                              f"{', '.join(unknown or ['samples_per_class'])}")
        spec = CollisionSpec(samples_per_class=samples_per_class,
                             **{k: tup(v) for k, v in self.collision.items()})
        try:
            spec.validate()
        except ValueError as exc:
            raise ConfigError(f"dataset.collision: {exc}") from exc
        return spec


@dataclass
class BackboneConfig:
    kind: str = "convnet"
    channels: List[int] = field(default_factory=lambda: [32, 64, 128, 128])
    stem: str = "cifar"


@dataclass
class OptimizerConfig:
    method: str = "sgd"
    schedule: str = "cosine"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 20
    batch_size: int = 32


@dataclass
class LossConfig:
    lambda_ta: float = 1.0
    lambda_mcls: float = 1.0


@dataclass
class SSLConfig:
    temperature: float = 0.1
    proj_dim: int = 128
    symmetric: bool = False
    augment: str = "simclr"
    on_memory: bool = True


@dataclass
class MergeConfig:
    heads: int = 4
    class_support: str = "all"            # merge classifier loss
    transfer_support: str = "all"
    transfer_samples: str = "all"


@dataclass
class AblationConfig:
    disable_transfer: bool = False
    disable_continual_ta: bool = False
    disable_merge: bool = False
    der_baseline: bool = False
    t0_merge_enabled: bool = True
    prune: bool = False
    target_rate: float = 0.4
    prune_mode: str = "fpgm"


@dataclass
class AnalysisConfig:
    record_attention: bool = True
    probe_size: int = 16
    cka_probe_size: int = 400


# (section, field, zero allowed)
_NON_NEGATIVE = [
    ("", "memory_size", True), ("", "seed", True),
    ("dataset", "train_per_class", False), ("dataset", "test_per_class", False),
    ("optimizer", "lr", False), ("optimizer", "momentum", True),
    ("optimizer", "weight_decay", True), ("optimizer", "epochs", True),
    ("optimizer", "batch_size", False), ("loss", "lambda_ta", True),
    ("loss", "lambda_mcls", True), ("ssl", "temperature", False), ("ssl", "proj_dim", False),
    ("merge", "heads", False), ("analysis", "probe_size", False),
    ("analysis", "cka_probe_size", False),
]


@dataclass
class ExperimentConfig:
    name: str = "run"
    seed: int = 0
    output_dir: Optional[str] = None
    memory_size: int = 2000
    dtype: str = "float32"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ssl: SSLConfig = field(default_factory=SSLConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def __post_init__(self):
        # the baseline has no task-agnostic parts, whatever else was written
        if self.ablation.der_baseline:
            self.ablation = replace(self.ablation, disable_transfer=True,
                                    disable_continual_ta=True, disable_merge=True,
                                    t0_merge_enabled=False)
        self.validate()

    def validate(self):
        ds = self.dataset
        if ds.name not in ("collision", "directory"):
            raise ConfigError(f"dataset.name must be 'collision' or 'directory', got {ds.name!r}")
        if ds.name == "directory" and not ds.path:
            raise ConfigError("dataset.path is required for a directory dataset")
        try:
            ds.split_spec()
        except ValueError as exc:
            raise ConfigError(f"dataset: {exc}") from exc
        if ds.name == "collision":
            ds.collision_spec(max(1, ds.train_per_class))
        for where, key, zero_ok in _NON_NEGATIVE:
            value = getattr(getattr(self, where) if where else self, key)
            bad = not isinstance(value, (int, float)) or isinstance(value, bool)
            if bad or value < 0 or (value == 0 and not zero_ok):
                bound = ">= 0" if zero_ok else "> 0"
                raise ConfigError(f"{where + '.' if where else ''}{key} must be {bound}, "
                                  f"got {value!r}")
        if self.optimizer.method != "sgd" or self.optimizer.schedule != "cosine":
            raise ConfigError("only optimizer.method 'sgd' with schedule 'cosine' is supported")
        if self.ssl.augment not in PIPELINES:
            raise ConfigError(f"ssl.augment must be one of {sorted(PIPELINES)}")
        if self.backbone.kind not in ("convnet", "resnet18"):
            raise ConfigError("backbone.kind must be 'convnet' or 'resnet18'")
        if not 0 < self.ablation.target_rate < 1:
            raise ConfigError("ablation.target_rate must lie in (0, 1)")
        for key in ("class_support", "transfer_support"):
            if getattr(self.merge, key) not in ("all", "current"):
                raise ConfigError(f"merge.{key} must be 'all' or 'current'")
        if self.merge.transfer_samples not in ("all", "new"):
            raise ConfigError("merge.transfer_samples must be 'all' or 'new'")

    # ------------------------------------------------------------------
    def estimator_class(self):
        from .estimator import DERClassifier, TagFexClassifier
        return DERClassifier if self.ablation.der_baseline else TagFexClassifier

    def estimator_params(self) -> dict:
        """Keyword arguments for :meth:`estimator_class`."""
        common = dict(
            backbone=self.backbone.kind, channels=tuple(self.backbone.channels),
            stem=self.backbone.stem, epochs=self.optimizer.epochs,
            batch_size=self.optimizer.batch_size, lr=self.optimizer.lr,
            momentum=self.optimizer.momentum, weight_decay=self.optimizer.weight_decay,
            memory_size=self.memory_size,
            prune_rate=self.ablation.target_rate if self.ablation.prune else None,
            prune_mode=self.ablation.prune_mode, probe_size=self.analysis.probe_size,
            dtype=self.dtype, random_state=self.seed,
        )
        if self.ablation.der_baseline:
            return common
        ab = self.ablation
        return dict(
            common, lambda_ta=self.loss.lambda_ta, lambda_mcls=self.loss.lambda_mcls,
            temperature=self.ssl.temperature, symmetric_infonce=self.ssl.symmetric,
            proj_dim=self.ssl.proj_dim, augment=self.ssl.augment,
            ta_on_memory=self.ssl.on_memory, n_heads=self.merge.heads,
            mcls_support=self.merge.class_support,
            transfer_support=self.merge.transfer_support,
            transfer_samples=self.merge.transfer_samples,
            continual_ta=not ab.disable_continual_ta, merge=not ab.disable_merge,
            transfer=not ab.disable_transfer, t0_merge=ab.t0_merge_enabled,
            record_attention=self.analysis.record_attention,
        )

    def build_estimator(self):
        return self.estimator_class()(**self.estimator_params())

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------- parsing

def _build(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    try:
        return _build(ExperimentConfig, data, "")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data or {})


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def config_hash(config: ExperimentConfig) -> str:
    """Digest of everything that affects the numbers (the output location does not)."""
    data = config.to_dict()
    data.pop("output_dir", None)
    data.pop("name", None)
    blob = json.dumps(data, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def default_output_dir(config: ExperimentConfig) -> Path:
    if config.output_dir:
        return Path(config.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root) / f"{config.name}-s{config.seed}"


# ---------------------------------------------------------------------------- ablations

def ablation_matrix(base: ExperimentConfig) -> List[Tuple[str, ExperimentConfig]]:
    """The {fresh, continual} task-agnostic model x {no transfer, transfer} grid plus DER."""
    grid = []
    for continual in (False, True):
        for transfer in (False, True):
            name = ("continual-ta" if continual else "fresh-ta") + (
                "-transfer" if transfer else "")
            ab = replace(base.ablation, der_baseline=False, disable_merge=False,
                         disable_continual_ta=not continual, disable_transfer=not transfer)
            grid.append((name, replace(base, name=f"{base.name}-{name}", ablation=ab)))
    der = replace(base.ablation, der_baseline=True)
    grid.append(("der", replace(base, name=f"{base.name}-der", ablation=der)))
    return grid
