"""Declarative experiment configuration with YAML round trip and fingerprints."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..patch_forge import GeneratorConfig
from ..reconstructor import ReconstructorConfig
from ..tsr_classifier import ClassifierConfig


@dataclass
class DataConfig:
    manifest: str | None = None  # dataset root; None synthesises the toy corpus
    toy_classes: int = 10
    toy_per_class: int = 200
    test_fraction: float = 0.2
    augment: bool = True


@dataclass
class MaskConfig:
    levels: tuple[int, ...] = (1, 2, 4, 6)
    policy: str = "single_block"


@dataclass
class AttackConfig:
    kinds: tuple[str, ...] = ("IS", "LL", "NLS", "PG")
    count: int = 100
    # per-kind overrides of the calibrated sampling ranges in light_attacks.RANGES
    ranges: dict = field(default_factory=dict)


@dataclass
class EvalConfig:
    views: int = 6
    max_test: int | None = None
    similarity_samples: int = 100


@dataclass
class AblationConfig:
    attention: bool = True
    diversity: bool = True
    augmentation: bool = True
    mask_levels: bool = True
    view_counts: tuple[int, ...] = (2, 4, 6, 8, 10)


@dataclass
class ExperimentConfig:
    name: str = "default"
    variant: str = "base"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    masks: MaskConfig = field(default_factory=MaskConfig)
    attacks: AttackConfig = field(default_factory=AttackConfig)
    reconstructor: ReconstructorConfig = field(default_factory=ReconstructorConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    ablations: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        return _build(cls, d or {})

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_yaml())

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_yaml(Path(path).read_text())

    def fingerprint(self, *sections: str) -> str:
        """sha256 over the named sections (all of them when none are given)."""
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with the global seed pushed into every trainable stage."""
        out = self.replace()
        out.seed = seed
        for section in (out.classifier, out.generator, out.reconstructor):
            section.seed = seed
        return out

    def replace(self, **changes: Any) -> "ExperimentConfig":
        """Deep copy with dotted-path overrides, e.g. ``{"reconstructor.attention": False}``."""
        d = self.to_dict()
        for path, value in changes.items():
            node = d
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise KeyError(f"unknown config field {path!r}")
            node[leaf] = _plain(value)
        return ExperimentConfig.from_dict(d)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls, d: dict):
    if not isinstance(d, dict):
        raise ValueError(f"expected a mapping for {cls.__name__}, got {type(d).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {}
    hints = {f.name: f.default_factory for f in known.values() if f.default_factory is not dataclasses.MISSING}
    for name, value in d.items():
        factory = hints.get(name)
        if factory is not None and dataclasses.is_dataclass(factory):
            kwargs[name] = _build(factory, value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)
