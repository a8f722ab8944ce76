"""Labelled frame-stack samples drawn from synthetic or on-disk scenes."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoding import EncoderConfig, encode
from .errors import InsufficientDataError, ValidationError
from .event_io import EventStream, GtBox, SceneConfig, group_by_time, load_events, load_labels, synthesize_scene

log = logging.getLogger(__name__)

SCENE_PATTERN = re.compile(r"scene_(\d+)\.events\.(csv|bin)$")


@dataclass
class Sample:
    stack: np.ndarray  # int8 (S, C, H, W)
    boxes: list[GtBox]
    scene: int
    t_label: int


@dataclass
class Dataset:
    samples: list[Sample] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def stacks(self, indices: Sequence[int] | None = None) -> np.ndarray:
        idx = range(len(self.samples)) if indices is None else indices
        return np.stack([self.samples[i].stack for i in idx])

    def split_by_scene(self, val_fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Hold out whole scenes so no scene contributes to both splits."""
        scenes = sorted({s.scene for s in self.samples})
        if len(scenes) < 2:
            raise ValidationError("need samples from at least two scenes to split")
        order = np.random.default_rng(seed).permutation(len(scenes))
        n_val = min(len(scenes) - 1, max(1, round(val_fraction * len(scenes))))
        val_scenes = {scenes[i] for i in order[:n_val]}
        train = [s for s in self.samples if s.scene not in val_scenes]
        val = [s for s in self.samples if s.scene in val_scenes]
        return Dataset(train), Dataset(val)


def samples_from_scene(scene_id: int, stream: EventStream, boxes: Sequence[GtBox],
                       encoder: EncoderConfig, label_stride: int = 1) -> list[Sample]:
    """One sample per label timestamp that has enough history (every ``label_stride``-th)."""
    out = []
    for i, (t, group) in enumerate(sorted(group_by_time(boxes).items())):
        if i % label_stride:
            continue
        try:
            stack = encode(stream, t, encoder)
        except InsufficientDataError:
            continue
        out.append(Sample(stack.data, list(group), scene_id, t))
    return out


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def synthesize_dataset(n_samples: int, scene: SceneConfig, encoder: EncoderConfig,
                       seed: int = 1, label_stride: int = 1, max_scenes: int = 100_000) -> Dataset:
    """Draw scenes until ``n_samples`` samples exist; the last scene may be truncated."""
    samples: list[Sample] = []
    i = 0
    while len(samples) < n_samples:
        if i >= max_scenes:
            raise InsufficientDataError(f"only {len(samples)} samples after {i} scenes")
        stream, boxes = synthesize_scene(scene_seed(seed, i), scene)
        samples.extend(samples_from_scene(i, stream, boxes, encoder, label_stride))
        i += 1
    return Dataset(samples[:n_samples])


def scene_files(data_dir) -> list[tuple[int, Path, Path]]:
    data_dir = Path(data_dir)
    found = []
    for path in sorted(data_dir.iterdir()):
        m = SCENE_PATTERN.match(path.name)
        if m:
            labels = data_dir / f"scene_{m.group(1)}.labels.csv"
            if not labels.exists():
                raise ValidationError(f"{path}: no matching label file {labels.name}")
            found.append((int(m.group(1)), path, labels))
    if not found:
        raise ValidationError(f"{data_dir}: no scene_*.events.(csv|bin) files")
    return found


def load_dataset(data_dir, encoder: EncoderConfig, label_stride: int = 1,
                 max_samples: int | None = None) -> Dataset:
    H, W = encoder.geometry
    samples: list[Sample] = []
    for scene_id, events, labels in scene_files(data_dir):
        stream = load_events(events, (W, H))
        boxes = load_labels(labels, (W, H))
        samples.extend(samples_from_scene(scene_id, stream, boxes, encoder, label_stride))
        if max_samples is not None and len(samples) >= max_samples:
            return Dataset(samples[:max_samples])
    log.info("loaded %d samples from %s", len(samples), data_dir)
    return Dataset(samples)
