"""Synthetic two-modality lesion classification task.

Each lesion instance has class-conditional latents. The class lives in the
spatial frequency of a striped "vascular" texture drawn inside soft lesion
blobs. The NBI renderer shows that texture at high contrast. The WLI renderer
attenuates it by the modality gap and adds a colour cast, an illumination
ramp and stronger noise. A fraction of instances is rendered in both
modalities (a pair); the rest appear in exactly one.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import archive
from .grouping import ConfigurationError, Sample, read_manifest, write_manifest

NUM_FOLDS = 5


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 3
    per_class: int = 120
    pairing: float = 0.4
    gap: float = 0.85
    seed: int = 0
    image_size: int = 32
    nbi_amplitude: float = 0.35
    freq_base: float = 0.09     # cycles / pixel for class 0
    freq_step: float = 0.07
    freq_jitter: float = 0.02
    wli_noise: float = 0.06
    nbi_noise: float = 0.02


@dataclass(frozen=True)
class LesionInstance:
    instance_id: str
    label: int
    blobs: tuple[tuple[float, float, float], ...]   # (cy, cx, radius)
    frequency: float
    orientation: float
    phase: float


class DatasetQualityError(RuntimeError):
    pass


def class_frequency(cfg: SynthConfig, label: int) -> float:
    return cfg.freq_base + cfg.freq_step * label


def sample_instance(cfg: SynthConfig, label: int, index: int) -> LesionInstance:
    rng = np.random.default_rng([cfg.seed, 1, label, index])
    n_blobs = int(rng.integers(1, 3))
    s = cfg.image_size
    blobs = tuple((float(rng.uniform(0.25 * s, 0.75 * s)), float(rng.uniform(0.25 * s, 0.75 * s)),
                   float(rng.uniform(0.16 * s, 0.26 * s))) for _ in range(n_blobs))
    freq = class_frequency(cfg, label) + float(rng.uniform(-cfg.freq_jitter, cfg.freq_jitter))
    return LesionInstance(
        instance_id=f"c{label}_i{index:04d}", label=label, blobs=blobs, frequency=freq,
        orientation=float(rng.uniform(0.0, np.pi)), phase=float(rng.uniform(0.0, 2 * np.pi)))


def lesion_mask(inst: LesionInstance, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    m = np.zeros((size, size))
    for cy, cx, r in inst.blobs:
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        m = np.maximum(m, 1.0 / (1.0 + np.exp((d - r) / 1.5)))
    return m


def texture(inst: LesionInstance, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = xx * np.cos(inst.orientation) + yy * np.sin(inst.orientation)
    return np.cos(2 * np.pi * inst.frequency * u + inst.phase)


def render(inst: LesionInstance, modality: str, cfg: SynthConfig) -> np.ndarray:
    """Pixel tensor ``[3, H, W]`` of ``inst`` as seen in ``modality``."""
    rng = np.random.default_rng([cfg.seed, 2, inst.label, int(inst.instance_id[-4:]),
                                 0 if modality == "WLI" else 1])
    s = cfg.image_size
    m = lesion_mask(inst, s)
    tex = m * texture(inst, s)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / s
    if modality == "NBI":
        base = np.array([0.35, 0.45, 0.40])[:, None, None] * np.ones((3, s, s))
        img = base + 0.10 * m[None] * np.array([-1.0, 0.5, 0.8])[:, None, None]
        img = img + cfg.nbi_amplitude * tex[None] * np.array([0.3, 1.0, 0.8])[:, None, None]
        img = img + rng.normal(0.0, cfg.nbi_noise, img.shape)
    elif modality == "WLI":
        amp = cfg.nbi_amplitude * (1.0 - cfg.gap)
        cast = rng.normal(0.0, 0.08, 3)
        angle = rng.uniform(0, 2 * np.pi)
        ramp = 0.15 * ((xx - 0.5) * np.cos(angle) + (yy - 0.5) * np.sin(angle))
        base = np.array([0.70, 0.40, 0.35])[:, None, None] * np.ones((3, s, s))
        img = base + cast[:, None, None] + ramp[None]
        img = img + 0.10 * m[None] * np.array([0.8, -0.3, -0.3])[:, None, None]
        img = img + amp * tex[None] * np.array([1.0, 0.6, 0.4])[:, None, None]
        img = img + rng.normal(0.0, cfg.wli_noise, img.shape)
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return img


def generate(out_dir, cfg: SynthConfig = SynthConfig()) -> list[Sample]:
    """Render the dataset into ``out_dir`` (images/ + manifest.csv + synth.json)."""
    if cfg.per_class < 10:
        raise ConfigurationError("need at least 10 instances per class")
    if not 0.0 <= cfg.pairing <= 1.0:
        raise ConfigurationError(f"pairing fraction {cfg.pairing} outside [0, 1]")
    n_paired = int(round(cfg.pairing * cfg.per_class))
    if n_paired < NUM_FOLDS:
        raise ConfigurationError(
            f"only {n_paired} paired instances per class; cross-validation needs at least "
            f"{NUM_FOLDS} (paired data is the only test data)")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    samples: list[Sample] = []
    for label in range(cfg.classes):
        order = np.random.default_rng([cfg.seed, 3, label]).permutation(cfg.per_class)
        paired = set(order[:n_paired].tolist())
        fold_of = {int(k): pos % NUM_FOLDS for pos, k in enumerate(order[:n_paired])}
        alt = 0
        for k in range(cfg.per_class):
            inst = sample_instance(cfg, label, k)
            if k in paired:
                mods = ("WLI", "NBI")
            else:
                mods = (("WLI", "NBI")[alt % 2],)
                alt += 1
            for mod in mods:
                sid = f"{inst.instance_id}_{mod}"
                rel = f"images/{sid}.pgkd"
                archive.save(out / rel, {"image": render(inst, mod, cfg)})
                samples.append(Sample(
                    id=sid, path=rel, label=label, modality=mod,
                    pair_id=inst.instance_id if k in paired else None,
                    split="paired" if k in paired else "unpaired",
                    fold=fold_of.get(k)))
    write_manifest(out / "manifest.csv", samples)
    (out / "synth.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return samples


def load_config(data_dir) -> SynthConfig:
    return SynthConfig(**json.loads((Path(data_dir) / "synth.json").read_text()))


def instance_of(sample: Sample) -> str:
    return sample.id.rsplit("_", 1)[0]


class ImageStore:
    """Loads manifest images into memory and records which ids were read, per phase."""

    def __init__(self, root, samples: Sequence[Sample] | None = None):
        self.root = Path(root)
        self.samples = list(samples) if samples is not None else read_manifest(self.root / "manifest.csv")
        self.by_id = {s.id: s for s in self.samples}
        self._cache: dict[str, np.ndarray] = {}
        self.phase = "idle"
        self.accessed: dict[str, set[str]] = {}

    def image(self, sid: str) -> np.ndarray:
        self.accessed.setdefault(self.phase, set()).add(sid)
        img = self._cache.get(sid)
        if img is None:
            img = archive.load(self.root / self.by_id[sid].path)["image"]
            self._cache[sid] = img
        return img

    def stack(self, ids: Iterable[str]) -> np.ndarray:
        return np.stack([self.image(i) for i in ids])
