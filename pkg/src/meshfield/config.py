"""Run configuration: one JSON-serializable object covering the lattice,
model, and per-stage training budgets. Unknown keys are rejected so a
typo in a config file fails loudly, and the canonical-JSON hash is
stamped into checkpoints and baked manifests.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from . import lattice as lat


@dataclass
class StageConfig:
    steps: int = 1000
    batch_pixels: int = 64
    lr_start: float = 5e-4
    lr_end: float = 5e-5
    # the acceleration grid is its own argmin problem; a larger constant
    # step lets the hinge bound clear the pruning threshold within a few
    # visits per voxel even on short budgets
    grid_lr: float = 1e-2


@dataclass
class RunConfig:
    resolution: int = 16
    scene: dict = field(default_factory=lambda: {"tag": "synthetic", "scale": 1.0})
    model_width: int = 64
    encoding_degree: int = 6
    seed: int = 0
    supersample: int = 2
    distortion_weight: float = 0.0
    accel_threshold: float = 0.1
    patch_size: int = 17
    max_page_dim: int = 4096
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    stage1: StageConfig = field(default_factory=lambda: StageConfig(2600, 96))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(1300, 24))
    finetune: StageConfig = field(default_factory=lambda: StageConfig(400, 24, 2e-4, 5e-5))
    dataset_dir: str = ""
    out_dir: str = ""
    toy_train_views: int = 20
    toy_test_views: int = 5
    toy_image_size: int = 64

    def lattice_config(self) -> lat.LatticeConfig:
        return lat.LatticeConfig(self.resolution, lat.kind_from_dict(self.scene))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ConfigError(ValueError):
    pass


def _from_dict(cls, data: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if fields[name].type == "StageConfig" or name in ("stage1", "stage2", "finetune"):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{name} must be an object")
            kwargs[name] = _from_dict(StageConfig, value, f"{path}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data, "")


def load_config(path: str) -> RunConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))
