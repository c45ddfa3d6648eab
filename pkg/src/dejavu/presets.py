"""Named hyper-parameter bundles.

``paper`` carries the published training constants; ``desk`` is the scaled
down setting used by the acceptance suite (one CPU core, under a minute).
"""
from __future__ import annotations

from dataclasses import dataclass

from .encoder import EncoderConfig, OptimizerConfig
from .training import LossConfig


@dataclass(frozen=True)
class DatasetPreset:
    locations: int = 8
    seasons: int = 4
    frames: int = 4
    image_size: int = 32
    seed: int = 7


@dataclass(frozen=True)
class Preset:
    dataset: DatasetPreset
    encoder: EncoderConfig
    optimizer: OptimizerConfig
    loss: LossConfig
    seed: int = 7


PAPER = Preset(DatasetPreset(), EncoderConfig(),
               OptimizerConfig(learning_rate=0.001, epochs=160, momentum=0.0), LossConfig())

# 240 SGD steps at lr 0.001 leave the encoder where it started; a larger
# step with momentum is what makes 40 epochs on 6 locations enough
DESK = Preset(DatasetPreset(), EncoderConfig.desk(),
              OptimizerConfig(learning_rate=0.01, epochs=40, momentum=0.9), LossConfig())

PRESETS = {"paper": PAPER, "desk": DESK}
