"""Run configuration: one YAML tree covering every knob, validated as a whole.

Every artifact a run writes embeds the configuration hash so outputs can be
traced back to the exact settings that produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .backbone import BackboneConfig
from .data import DataConfig
from .losses import FineAnnotationCoeffs, LossWeights
from .prototypes import PrototypeConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    prototypes: PrototypeConfig = field(default_factory=lambda: PrototypeConfig())
    loss_weights: LossWeights = field(default_factory=LossWeights)
    fine_annotation: FineAnnotationCoeffs = field(default_factory=FineAnnotationCoeffs)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        try:
            self.backbone.validate()
            self.prototypes.validate(self.backbone.levels)
            self.loss_weights.validate()
            self.fine_annotation.validate()
            self.train.validate()
            self.data.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.data.image_size != self.backbone.input_size:
            raise ConfigError(
                f"data.image_size ({self.data.image_size}) must equal "
                f"backbone.input_size ({self.backbone.input_size})"
            )

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            section = dataclasses.asdict(getattr(self, f.name))
            for k, v in section.items():
                if isinstance(v, tuple):
                    section[k] = list(v)
            out[f.name] = section
        return out

    @classmethod
    def from_dict(cls, tree: dict) -> "RunConfig":
        if not isinstance(tree, dict):
            raise ConfigError("config root must be a mapping")
        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(tree) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kwargs = {}
        defaults = cls()
        for name, f in sections.items():
            section_cls = type(getattr(defaults, name))
            raw = tree.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"{name}: must be a mapping")
            valid = {sf.name for sf in dataclasses.fields(section_cls)}
            bad = set(raw) - valid
            if bad:
                raise ConfigError(f"{name}: unknown field(s) {sorted(bad)}")
            merged = dataclasses.asdict(getattr(defaults, name)) | raw
            for k, v in merged.items():
                if isinstance(getattr(getattr(defaults, name), k), tuple):
                    merged[k] = tuple(v)
            kwargs[name] = section_cls(**merged)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path) -> RunConfig:
    with open(path) as f:
        tree = yaml.safe_load(f)
    return RunConfig.from_dict(tree or {})


def dump_default_config() -> str:
    return yaml.safe_dump(RunConfig().to_dict(), sort_keys=True)
