"""Top-level run configuration: one JSON document for every CLI command."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoding import EncoderConfig
from .errors import ConfigError
from .event_io import SceneConfig
from .serde import from_dict, to_dict
from .spikefpn import NetworkSpec, desk_spec
from .training import TrainConfig, desk_train_config

CONFIG_VERSION = 1


@dataclass
class DatasetConfig:
    """How many synthetic samples to draw and how labels are turned into samples."""

    samples: int = 500
    label_stride: int = 1
    val_fraction: float = 0.1
    seed: int = 1


@dataclass
class EvalConfig:
    score_threshold: float = 0.3
    nms_iou: float = 0.5


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    scene: SceneConfig = field(default_factory=SceneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    network: NetworkSpec = field(default_factory=desk_spec)
    train: TrainConfig = field(default_factory=desk_train_config)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        self.scene.validate()
        self.encoder.validate()
        self.network.validate()
        self.train.validate()
        H, W = self.encoder.geometry
        if (self.scene.width, self.scene.height) != (W, H):
            raise ConfigError("scene geometry and encoder geometry differ")
        if tuple(self.network.input_hw) != (H, W):
            raise ConfigError("network input size and encoder geometry differ")
        if (self.network.time_steps, self.network.frames_per_stack) != (
            self.encoder.stacks, self.encoder.frames_per_stack):
            raise ConfigError("network (time_steps, frames_per_stack) must equal encoder (stacks, frames_per_stack)")
        if not 0 < self.dataset.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.dataset.samples < 2 or self.dataset.label_stride < 1:
            raise ConfigError("need at least 2 samples and label_stride >= 1")
        return self


def load_run_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return from_dict(RunConfig, data).validate()


def dump_run_config(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), sort_keys=True, indent=2) + "\n"
