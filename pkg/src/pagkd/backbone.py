"""Small CNN classifier shared by the teacher (NBI) and student (WLI) branches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    stages: tuple[int, ...] = (16, 32, 64)
    image_size: int = 32
    num_classes: int = 3
    layer_norm: bool = False
    standardize: bool = True    # per-image, per-channel input standardisation

    @property
    def d(self) -> int:
        return self.stages[-1]

    @property
    def h(self) -> int:
        return self.image_size // 2 ** len(self.stages)

    @property
    def w(self) -> int:
        return self.h

    def validate(self) -> None:
        if self.image_size % 2 ** len(self.stages):
            raise ValueError(f"image_size {self.image_size} not divisible by 2^{len(self.stages)}")
        if self.h * self.w < 4:
            raise ValueError(f"feature map {self.h}x{self.w} has fewer than 4 positions")
        if self.d % 4:
            raise ValueError(f"feature dim {self.d} must be divisible by 4")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")


@dataclass
class ClassifierOutput:
    features: Tensor     # [N, d, h, w]
    logits: Tensor       # [N, C]
    fc_weights: Tensor   # [C, d]
    pooled: Tensor       # [N, d]


class Backbone:
    """``len(stages)`` x (3x3 conv, ReLU, 2x2 avg-pool), then GAP and a linear head.

    Parameters are named ``{prefix}.conv{i}.weight`` etc. so teacher and student
    can share one checkpoint file.
    """

    def __init__(self, cfg: BackboneConfig, seed: int = 0, prefix: str = "student"):
        cfg.validate()
        self.cfg = cfg
        self.prefix = prefix
        self.frozen = False
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        cin = cfg.in_channels
        for i, cout in enumerate(cfg.stages):
            std = np.sqrt(2.0 / (cin * 9))
            self._add(f"conv{i}.weight", rng.normal(0.0, std, (cout, cin, 3, 3)))
            self._add(f"conv{i}.bias", np.zeros(cout))
            cin = cout
        self._add("fc.weight", rng.normal(0.0, np.sqrt(1.0 / cin), (cfg.num_classes, cin)))
        self._add("fc.bias", np.zeros(cfg.num_classes))

    def _add(self, local: str, value: np.ndarray) -> None:
        name = f"{self.prefix}.{local}"
        self.params[name] = T.parameter(value, name)

    def p(self, local: str) -> Tensor:
        return self.params[f"{self.prefix}.{local}"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, images) -> ClassifierOutput:
        x = T.as_tensor(images)
        cfg = self.cfg
        if x.ndim != 4 or x.shape[0] < 1 or x.shape[1] != cfg.in_channels \
                or x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
            raise DimensionError(
                f"expected images [N,{cfg.in_channels},{cfg.image_size},{cfg.image_size}], got {x.shape}")
        if cfg.standardize:
            x = Tensor(standardize(x.data))     # preprocessing; images carry no gradient
        for i in range(len(cfg.stages)):
            x = T.conv2d(x, self.p(f"conv{i}.weight"), self.p(f"conv{i}.bias"), padding=1)
            if cfg.layer_norm:
                x = T.layer_norm(x, axes=(1, 2, 3))
            x = T.relu(x)
            x = T.avg_pool2d(x, 2)
        pooled = T.global_avg_pool(x)
        fc_w = self.p("fc.weight")
        logits = T.matmul(pooled, T.transpose(fc_w)) + self.p("fc.bias")
        return ClassifierOutput(features=x, logits=logits, fc_weights=fc_w, pooled=pooled)

    __call__ = forward

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = [k for k in self.params if k not in state]
        if missing and strict:
            raise KeyError(f"checkpoint is missing parameters: {missing}")
        for k, t in self.params.items():
            if k in state:
                arr = np.asarray(state[k], dtype=np.float64)
                if arr.shape != t.shape:
                    raise DimensionError(f"{k}: checkpoint shape {arr.shape} != {t.shape}")
                t.data = arr.copy()


def standardize(images: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Zero-mean each channel of each image, then scale each image to unit std.

    Removes the per-image colour cast and brightness; a constant image maps to 0.
    """
    x = np.asarray(images, dtype=np.float64)
    x = x - x.mean(axis=(2, 3), keepdims=True)
    return x / (x.std(axis=(1, 2, 3), keepdims=True) + eps)


def freeze(model: Backbone) -> Backbone:
    """Stop every parameter of ``model`` from receiving gradients or updates."""
    for t in model.params.values():
        t.requires_grad = False
        t.grad = None
    model.frozen = True
    return model


def compute_cam(out: ClassifierOutput, class_id: int) -> Tensor:
    """Class activation map for ``class_id``, min-max normalised per image.

    A spatially constant map normalises to 0.5 everywhere.
    """
    n_classes = out.fc_weights.shape[0]
    if not 0 <= class_id < n_classes:
        raise IndexError(f"class {class_id} outside [0, {n_classes})")
    raw = raw_cam(out.features.data, out.fc_weights.data[class_id])
    return Tensor(normalize_cam(raw))


def raw_cam(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.einsum("ndxy,d->nxy", features, weights)


def normalize_cam(raw: np.ndarray) -> np.ndarray:
    lo = raw.min(axis=(1, 2), keepdims=True)
    hi = raw.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    flat = span <= 1e-12 * np.maximum(1.0, np.abs(hi))
    return np.where(flat, 0.5, (raw - lo) / np.where(flat, 1.0, span))
