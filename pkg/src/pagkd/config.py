"""Experiment configuration dataclasses and YAML round-tripping."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .backbone import BackboneConfig

PAIRING_MODES = ("group", "image", "mixed")
NORM_MODES = ("mean", "paper")
REFINEMENTS = ("pixel-adaptive", "identity")


@dataclass(frozen=True)
class TeacherConfig:
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 1e-8
    batch_size: int = 24


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    weight_decay: float = 1e-8
    batch_size: int = 24
    num_queries: int = 12
    qformer_blocks: int = 2
    tau1: float = 0.3
    tau2: float = 0.7
    reform_period: int = 5
    enable_pro: bool = True
    enable_den: bool = True
    use_qformer: bool = True
    use_srca: bool = True
    bidirectional: bool = True
    pairing_mode: str = "group"
    norm_mode: str = "mean"
    refinement: str = "pixel-adaptive"
    refine_iters: int = 10
    sigma_c: float = 0.1
    sigma_s: float = 1.0
    refine_include_self: bool = False
    exclude_positive: bool = False
    seed: int = 0
    fold: int = 0
    checkpoint_every: int = 10
    stages: tuple[int, ...] = (16, 32, 64)
    image_size: int = 32
    layer_norm: bool = False
    teacher: TeacherConfig = field(default_factory=TeacherConfig)

    def __post_init__(self):
        if self.pairing_mode not in PAIRING_MODES:
            raise ValueError(f"pairing_mode must be one of {PAIRING_MODES}")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}")
        if self.refinement not in REFINEMENTS:
            raise ValueError(f"refinement must be one of {REFINEMENTS}")
        if not 0.0 < self.tau1 < self.tau2 < 1.0:
            raise ValueError(f"need 0 < tau1 < tau2 < 1, got {self.tau1}, {self.tau2}")
        object.__setattr__(self, "stages", tuple(self.stages))

    def backbone(self, num_classes: int) -> BackboneConfig:
        return BackboneConfig(stages=self.stages, image_size=self.image_size,
                              num_classes=num_classes, layer_norm=self.layer_norm)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["stages"] = list(self.stages)
        return d

    def updated(self, **changes) -> "TrainConfig":
        teacher = changes.pop("teacher", None)
        cfg = replace(self, **changes)
        if teacher is not None:
            if isinstance(teacher, dict):
                teacher = replace(self.teacher, **teacher)
            cfg = replace(cfg, teacher=teacher)
        return cfg


def from_dict(data: dict[str, Any], base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return base.updated(**dict(data))


def load(path, base: TrainConfig | None = None) -> TrainConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    return from_dict(data, base)


def dump(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


# Settings used for the desk-scale experiments: from-scratch training of a
# tiny CNN needs a larger step, far fewer epochs and per-stage normalisation,
# and on 4x4 CAMs only a single self-inclusive refinement pass keeps the peaks.
# The dense loss uses the literal 1/(C L^2) scaling, which keeps it from
# swamping the classification gradient.
DESK = TrainConfig(epochs=16, lr=2e-3, stages=(8, 16, 32), layer_norm=True, norm_mode="paper",
                   refine_iters=1, refine_include_self=True,
                   teacher=TeacherConfig(epochs=20, lr=2e-3))
