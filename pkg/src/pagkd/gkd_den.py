"""Group-level dense distillation.

CAMs of both groups of a class are refined and tri-thresholded into
background / lesion / ambiguous labels, a relation mask allows attention only
between confidently and identically labelled positions, and relation-guided
cross-attention rebuilds each modality's group features from the other's.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .grouping import ConfigurationError
from .tensor import SENTINEL_NEG_INF, DimensionError, Tensor

BG, FG, AMB = 0, 1, -1

_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
_WINDOW = [(0, 0)] + _OFFSETS


def downsample(images: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c, H, W = images.shape
    return images.reshape(n, c, h, H // h, w, W // w).mean(axis=(3, 5))


def neighbour_affinity(guide: np.ndarray, sigma_c: float, sigma_s: float,
                       offsets=_OFFSETS) -> np.ndarray:
    """Softmax over ``offsets`` of ``-(colour_dist/sigma_c + spatial_dist/sigma_s)``.

    ``guide`` is [N, ch, h, w]; returns [N, len(offsets), h, w] with
    out-of-bounds neighbours at 0.
    """
    n, _, h, w = guide.shape
    pad = np.pad(guide, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    logits = np.empty((n, len(offsets), h, w))
    valid = np.zeros((len(offsets), h, w), dtype=bool)
    for k, (dy, dx) in enumerate(offsets):
        nb = pad[:, :, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        colour = np.sqrt(((guide - nb) ** 2).sum(axis=1))
        logits[:, k] = -(colour / sigma_c + np.hypot(dy, dx) / sigma_s)
        ys, xs = np.arange(h)[:, None] + dy, np.arange(w)[None, :] + dx
        valid[k] = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    logits = np.where(valid[None], logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.where(valid[None], np.exp(logits), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def refine_cam(cam: np.ndarray, guide_images: np.ndarray | None = None, iterations: int = 10,
               sigma_c: float = 0.1, sigma_s: float = 1.0, include_self: bool = False) -> np.ndarray:
    """Pixel-adaptive smoothing of normalised CAMs ``[N, h, w]``.

    Each iteration replaces every pixel by an affinity-weighted average of its
    8 neighbours (affinities from the guide image downsampled to ``h x w``) and
    clamps to [0, 1]. ``include_self`` widens the window to the full 3x3 so a
    pixel keeps part of its own value, which matters on very coarse maps.
    ``iterations=0`` or ``guide_images=None`` is the identity.
    """
    cam = np.asarray(cam, dtype=np.float64)
    if iterations <= 0 or guide_images is None:
        return cam.copy()
    n, h, w = cam.shape
    offsets = _WINDOW if include_self else _OFFSETS
    aff = neighbour_affinity(downsample(np.asarray(guide_images, dtype=np.float64), h, w),
                             sigma_c, sigma_s, offsets)
    out = cam.copy()
    for _ in range(iterations):
        pad = np.pad(out, ((0, 0), (1, 1), (1, 1)), mode="edge")
        acc = np.zeros_like(out)
        for k, (dy, dx) in enumerate(offsets):
            acc += aff[:, k] * pad[:, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        out = np.clip(acc, 0.0, 1.0)
    return out


def tri_threshold(values: np.ndarray, tau1: float = 0.3, tau2: float = 0.7) -> np.ndarray:
    """Map values in [0, 1] to BG (< tau1), FG (> tau2) or AMB (inclusive middle band)."""
    if not 0.0 < tau1 < tau2 < 1.0:
        raise ConfigurationError(f"need 0 < tau1 < tau2 < 1, got tau1={tau1}, tau2={tau2}")
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    out = np.full(v.shape, AMB, dtype=np.int8)
    out[v < tau1] = BG
    out[v > tau2] = FG
    return out


@dataclass
class RelationMatrix:
    bias: np.ndarray                 # [L_wli, L_nbi], 0 or SENTINEL_NEG_INF
    labels_row: np.ndarray
    labels_col: np.ndarray
    stats: dict = field(default_factory=dict)

    @property
    def T(self) -> "RelationMatrix":
        return RelationMatrix(self.bias.T.copy(), self.labels_col, self.labels_row,
                              _relation_stats(self.bias.T, self.labels_col, self.labels_row))


def _relation_stats(bias: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> dict:
    matched = bias == 0
    return {
        "matched": int(matched.sum()),
        "matched_frac": float(matched.mean()) if matched.size else 0.0,
        "ambiguous_rows": int((rows == AMB).sum()),
        "all_masked_rows": int((~matched.any(axis=1)).sum()),
        "fg_frac_row": float((rows == FG).mean()) if rows.size else 0.0,
        "fg_frac_col": float((cols == FG).mean()) if cols.size else 0.0,
        "amb_frac": float((np.concatenate([rows, cols]) == AMB).mean()) if rows.size + cols.size else 0.0,
    }


def build_relation(labels_wli: np.ndarray, labels_nbi: np.ndarray) -> RelationMatrix:
    """0 where both positions are confidently labelled with the same label, else sentinel."""
    a = np.asarray(labels_wli).reshape(-1)
    b = np.asarray(labels_nbi).reshape(-1)
    same = (a[:, None] == b[None, :]) & (a[:, None] != AMB)
    bias = np.where(same, 0.0, SENTINEL_NEG_INF)
    return RelationMatrix(bias, a, b, _relation_stats(bias, a, b))


def with_row_fallback(bias: np.ndarray) -> np.ndarray:
    """Drop the mask on rows that have no admissible column."""
    dead = ~(bias > SENTINEL_NEG_INF / 2).any(axis=1)
    if not dead.any():
        return bias
    out = bias.copy()
    out[dead] = 0.0
    return out


@dataclass
class AttentionAudit:
    """Running tally of attention-mask checks made during training."""

    matrices: int = 0
    violations: int = 0
    tol: float = 1e-9
    notes: list = field(default_factory=list)

    def check(self, attn: np.ndarray, bias: np.ndarray | None) -> None:
        self.matrices += 1
        bad = False
        if np.abs(attn.sum(axis=1) - 1.0).max() > self.tol:
            bad = True
        if bias is not None:
            masked = bias <= SENTINEL_NEG_INF / 2
            if np.any(attn[masked] != 0.0):
                bad = True
        if bad:
            self.violations += 1
            if len(self.notes) < 10:
                self.notes.append(f"matrix {self.matrices} failed mask/row-sum check")


class SRCA:
    """Relation-guided cross-attention with ``W_q, W_k: d x d/4`` and ``W_v: d x d``.

    One weight set serves both directions; the destination side supplies the
    queries and the source side the keys and values.
    """

    def __init__(self, d: int, seed: int = 0, value_init: str = "identity"):
        if d % 4:
            raise ConfigurationError(f"SRCA needs d divisible by 4, got {d}")
        self.d = d
        rng = np.random.default_rng(seed)
        dk = d // 4
        wv = np.eye(d) if value_init == "identity" else rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        self.params = {
            "srca.wq": T.parameter(rng.normal(0.0, 1.0 / np.sqrt(d), (d, dk)), "srca.wq"),
            "srca.wk": T.parameter(rng.normal(0.0, 1.0 / np.sqrt(d), (d, dk)), "srca.wk"),
            "srca.wv": T.parameter(wv, "srca.wv"),
        }

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def reconstruct(self, f_src: Tensor, f_dst: Tensor, bias: np.ndarray | None,
                    audit: AttentionAudit | None = None) -> Tensor:
        """Rebuild ``f_src`` in ``f_dst``'s coordinates: ``[L_dst, d]``.

        ``bias`` is ``[L_dst, L_src]`` (or None for unmasked attention).
        """
        return srca_reconstruct(f_src, f_dst, bias, self.params["srca.wq"], self.params["srca.wk"],
                                self.params["srca.wv"], audit)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state) -> None:
        for k, t in self.params.items():
            t.data = np.asarray(state[k], dtype=np.float64).copy()


def srca_reconstruct(f_src: Tensor, f_dst: Tensor, bias, wq: Tensor, wk: Tensor, wv: Tensor,
                     audit: AttentionAudit | None = None) -> Tensor:
    d = f_src.shape[1]
    if d % 4:
        raise ConfigurationError(f"SRCA needs d divisible by 4, got {d}")
    if f_dst.shape[1] != d:
        raise DimensionError(f"feature dims differ: {f_src.shape} vs {f_dst.shape}")
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (f_dst.shape[0], f_src.shape[0]):
            raise DimensionError(
                f"relation {bias.shape} does not match [L_dst, L_src]=({f_dst.shape[0]}, {f_src.shape[0]})")
        bias = with_row_fallback(bias)
    scores = T.matmul(T.matmul(f_dst, wq), T.transpose(T.matmul(f_src, wk))) * (1.0 / np.sqrt(d / 4))
    attn = T.masked_softmax(scores, bias)
    if audit is not None:
        audit.check(attn.data, bias)
    return T.matmul(attn, T.matmul(f_src, wv))


def srca_param_count(d: int) -> int:
    return 2 * d * (d // 4) + d * d


@dataclass
class DenseTerm:
    """Originals and reconstructions for one class."""

    f_wli: Tensor
    f_nbi: Tensor
    nbi_to_wli: Tensor
    wli_to_nbi: Tensor | None = None


def dense_loss(terms: Sequence[DenseTerm], norm_mode: str = "mean",
               bidirectional: bool = True) -> Tensor:
    """Consistency between each group and its cross-modal reconstruction.

    ``mean``: average over included directions and classes of the per-position
    mean L2 distance. ``paper``: per-class sums divided by ``C * L_wli**2``.
    """
    if norm_mode not in ("mean", "paper"):
        raise ValueError(f"unknown norm_mode {norm_mode!r}")
    if not terms:
        return Tensor(0.0)
    parts = []
    for t in terms:
        if t.f_wli.shape != t.nbi_to_wli.shape:
            raise DimensionError(f"WLI group {t.f_wli.shape} vs reconstruction {t.nbi_to_wli.shape}")
        dist_w = T.l2_norm(t.f_wli - t.nbi_to_wli, axis=1)
        dirs = [dist_w]
        if bidirectional:
            if t.wli_to_nbi is None or t.f_nbi.shape != t.wli_to_nbi.shape:
                got = None if t.wli_to_nbi is None else t.wli_to_nbi.shape
                raise DimensionError(f"NBI group {t.f_nbi.shape} vs reconstruction {got}")
            dirs.append(T.l2_norm(t.f_nbi - t.wli_to_nbi, axis=1))
        if norm_mode == "mean":
            parts.extend(T.mean(x) for x in dirs)
        else:
            lw = t.f_wli.shape[0]
            parts.append(sum_all(dirs) * (1.0 / (lw * lw)))
    total = sum_all(parts)
    if norm_mode == "mean":
        return total * (1.0 / len(parts))
    return total * (1.0 / len(terms))


def sum_all(xs: Sequence[Tensor]) -> Tensor:
    return T.sum(T.concat([T.reshape(T.sum(x), (1,)) for x in xs]))
