"""Group-level prototype distillation.

Shared lesion queries are refined against each group's flattened features by
a small query transformer; the refined query sets of every (class, modality)
group are then compared with a symmetric group-level contrastive loss.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T
from .grouping import MODALITIES, ConfigurationError
from .tensor import Tensor

NORM_EPS = 1e-12


def sinusoidal_positions(h: int, w: int, d: int) -> np.ndarray:
    """Fixed 2D sine/cosine table ``[h*w, d]``: first half encodes y, second half x."""
    if d % 4:
        raise ConfigurationError(f"positional encoding needs d divisible by 4, got {d}")
    quarter = d // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ys, xs = ys.reshape(-1, 1) * freqs, xs.reshape(-1, 1) * freqs
    return np.concatenate([np.sin(ys), np.cos(ys), np.sin(xs), np.cos(xs)], axis=1)


def _attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    scores = T.matmul(q, T.transpose(k)) * (1.0 / np.sqrt(q.shape[1]))
    return T.matmul(T.softmax(scores), v)


class QFormer:
    """``blocks`` x (self-attention, cross-attention) over shared queries.

    Each sub-layer is single-head with a residual connection followed by a
    parameter-free layer norm. With ``blocks=0`` the queries pass through.
    """

    SUBLAYER = ("wq", "wk", "wv", "wo")

    def __init__(self, d: int, num_queries: int = 12, blocks: int = 2, seed: int = 0):
        self.d, self.num_queries, self.blocks = d, num_queries, blocks
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.params["qformer.queries"] = T.parameter(rng.normal(0.0, 1.0, (num_queries, d)),
                                                     "qformer.queries")
        for t in range(blocks):
            for part in ("sa", "ca"):
                for m in self.SUBLAYER:
                    name = f"qformer.block{t}.{part}.{m}"
                    self.params[name] = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)), name)

    @property
    def queries(self) -> Tensor:
        return self.params["qformer.queries"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _w(self, t: int, part: str, m: str) -> Tensor:
        return self.params[f"qformer.block{t}.{part}.{m}"]

    def forward(self, features: Tensor, h: int, w: int) -> Tensor:
        """Refine the shared queries against a flattened group ``[L, d]``.

        Positions are tiled per image, so ``L`` must be a multiple of ``h*w``.
        """
        length, d = features.shape
        if d != self.d:
            raise ConfigurationError(f"group feature dim {d} != query dim {self.d}")
        if length <= self.num_queries:
            raise ConfigurationError(
                f"group length {length} must exceed the number of queries {self.num_queries}")
        if length % (h * w):
            raise ConfigurationError(f"group length {length} is not a multiple of h*w={h * w}")
        pos = np.tile(sinusoidal_positions(h, w, d), (length // (h * w), 1))
        memory = features + pos
        q = self.queries
        for t in range(self.blocks):
            sa = _attend(q @ self._w(t, "sa", "wq"), q @ self._w(t, "sa", "wk"),
                         q @ self._w(t, "sa", "wv"))
            q = T.layer_norm(q + sa @ self._w(t, "sa", "wo"))
            ca = _attend(q @ self._w(t, "ca", "wq"), memory @ self._w(t, "ca", "wk"),
                         memory @ self._w(t, "ca", "wv"))
            q = T.layer_norm(q + ca @ self._w(t, "ca", "wo"))
        return q

    __call__ = forward

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            t.data = np.asarray(state[k], dtype=np.float64).copy()


def qformer_param_count(d: int, num_queries: int, blocks: int) -> int:
    """Closed form: shared queries plus 8 ``d x d`` projections per block."""
    return num_queries * d + blocks * 8 * d * d


def _row_normalize(a: Tensor) -> Tensor:
    a = T.as_tensor(a)
    norms = T.l2_norm(a, axis=1)
    if np.any(norms.data < NORM_EPS):
        raise FloatingPointError("query set has a zero-norm row")
    return a / T.reshape(norms, (a.shape[0], 1))


def _guard(norms: Tensor) -> Tensor:
    # eps only where a norm is (near) zero, so scaling stays exact elsewhere
    return norms + np.where(norms.data < NORM_EPS, NORM_EPS, 0.0)


def prototype_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Mean cosine similarity between rows with the same index."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape != b.shape:
        raise T.DimensionError(f"query sets differ in shape: {a.shape} vs {b.shape}")
    na = T.l2_norm(a, axis=1)
    nb = T.l2_norm(b, axis=1)
    if np.any((na.data < NORM_EPS) & (nb.data < NORM_EPS)):
        raise FloatingPointError("both query rows have (near) zero norm")
    cos = T.sum(a * b, axis=1) / (_guard(na) * _guard(nb))
    return T.mean(cos)


def contrastive_loss(sets: Mapping[tuple[int, str], Tensor],
                     exclude_positive: bool = False) -> Tensor:
    """Symmetric cross-modal contrastive loss over refined query sets.

    Each class contributes a WLI-anchored and an NBI-anchored log-ratio whose
    positive is the other modality of the same class; the denominator sums
    over every set except the anchor (and the positive too when
    ``exclude_positive``).
    """
    classes = sorted({c for c, _ in sets})
    for c in classes:
        for mod in MODALITIES:
            if (c, mod) not in sets:
                raise KeyError(f"class {c} has no {mod} query set")
    keys = [(c, mod) for c in classes for mod in MODALITIES]
    n_rows, d = sets[keys[0]].shape
    flat = [T.reshape(_row_normalize(sets[k]), (1, n_rows * d)) for k in keys]
    stacked = T.concat(flat, axis=0)
    sim = T.matmul(stacked, T.transpose(stacked)) * (1.0 / n_rows)
    terms = []
    for i, (c, mod) in enumerate(keys):
        j = keys.index((c, MODALITIES[1] if mod == MODALITIES[0] else MODALITIES[0]))
        others = [k for k in range(len(keys)) if k != i and not (exclude_positive and k == j)]
        if not others:
            continue
        pos = T.take(sim, (i, j))
        denom = T.logsumexp(T.take(sim, (np.full(len(others), i), np.asarray(others))), axis=0)
        terms.append(pos - denom)
    if not terms:
        return T.Tensor(0.0)
    return T.sum(T.concat([T.reshape(t, (1,)) for t in terms])) * (-1.0 / (2 * len(classes)))


def pooled_query_set(pooled: Tensor) -> Tensor:
    """Ablation stand-in for refined queries: the group mean of GAP vectors, ``[1, d]``."""
    return T.mean(pooled, axis=0, keepdims=True)
