"""Per-class, per-modality image groups: manifest I/O, group sizing, reforming,
and flattening backbone features into group feature matrices."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

MODALITIES = ("WLI", "NBI")
MANIFEST_COLUMNS = ("id", "path", "class", "modality", "pair_id", "split", "fold")
MIN_GROUP = 2

Cell = tuple[int, str]


class ConfigurationError(ValueError):
    pass


class DataError(KeyError):
    pass


@dataclass(frozen=True)
class Sample:
    id: str
    path: str
    label: int
    modality: str
    pair_id: str | None
    split: str
    fold: int | None


def read_manifest(path) -> list[Sample]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigurationError(f"manifest {path} lacks columns {missing}")
        rows = []
        for r in reader:
            if r["modality"] not in MODALITIES:
                raise ConfigurationError(f"unknown modality {r['modality']!r} for {r['id']}")
            rows.append(Sample(
                id=r["id"], path=r["path"], label=int(r["class"]), modality=r["modality"],
                pair_id=r["pair_id"] or None, split=r["split"],
                fold=int(r["fold"]) if r["fold"] not in ("", None) else None))
    return rows


def write_manifest(path, samples: Iterable[Sample]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for s in samples:
            w.writerow([s.id, s.path, s.label, s.modality, s.pair_id or "", s.split,
                        "" if s.fold is None else s.fold])


def count_cells(samples: Iterable[Sample]) -> dict[Cell, int]:
    counts: dict[Cell, int] = {}
    for s in samples:
        counts[(s.label, s.modality)] = counts.get((s.label, s.modality), 0) + 1
    return counts


def _proportional(counts: Mapping[int, int], budget: int, minimum: int = MIN_GROUP) -> dict[int, int]:
    """Largest-remainder apportionment of ``budget`` with a per-class floor.

    Classes whose exact quota falls below ``minimum`` are pinned to it and the
    rest of the budget is re-apportioned among the others. Remainder ties go
    to the smaller class id.
    """
    if budget < minimum * len(counts):
        raise ConfigurationError(
            f"budget {budget} cannot give {len(counts)} groups at least {minimum} each")
    alloc: dict[int, int] = {}
    active = sorted(counts)
    while True:
        left = budget - sum(alloc.values())
        total = sum(counts[c] for c in active)
        quotas = {c: Fraction(left * counts[c], total) for c in active}
        low = [c for c in active if quotas[c] < minimum]
        if not low:
            break
        for c in low:
            alloc[c] = minimum
        active = [c for c in active if c not in low]
        if not active:
            break
    if active:
        floors = {c: math.floor(q) for c, q in quotas.items()}
        spare = left - sum(floors.values())
        by_remainder = sorted(active, key=lambda c: (-(quotas[c] - floors[c]), c))
        for c in by_remainder[:spare]:
            floors[c] += 1
        alloc.update(floors)
    return {c: alloc[c] for c in sorted(counts)}


def allocate(class_counts: Mapping[Cell, int], s: int) -> dict[Cell, int]:
    """Group size per (class, modality) cell for a batch of ``s`` images.

    The budget is split evenly between the modalities present (WLI takes the
    odd image) and then apportioned across classes by class frequency.
    """
    mods = [m for m in MODALITIES if any(k[1] == m for k in class_counts)]
    cells = sum(1 for v in class_counts.values() if v > 0)
    if s < MIN_GROUP * cells:
        raise ConfigurationError(
            f"batch budget s={s} too small: need s >= {MIN_GROUP * cells} "
            f"for {cells} groups of at least {MIN_GROUP}")
    sizes: dict[Cell, int] = {}
    base, extra = divmod(s, len(mods))
    for i, mod in enumerate(mods):
        budget = base + (1 if i < extra else 0)
        per_class = {c: n for (c, m), n in class_counts.items() if m == mod and n > 0}
        for c, n in _proportional(per_class, budget).items():
            sizes[(c, mod)] = n
    return sizes


@dataclass
class GroupPlan:
    """Group sizes plus the current shuffled membership of every cell.

    Batch ``b`` of an epoch uses the ``b``-th consecutive chunk of each cell's
    shuffled pool, wrapping around so smaller cells are cycled.
    """

    sizes: dict[Cell, int]
    members: dict[Cell, tuple[str, ...]]
    pools: dict[Cell, tuple[str, ...]]
    batch_budget: int = 24
    reform_period: int = 5
    base_seed: int = 0
    seed: int = 0
    num_batches: int = 1

    def groups(self, batch_index: int) -> dict[Cell, list[str]]:
        out = {}
        for cell, size in self.sizes.items():
            pool = self.pools[cell]
            start = (batch_index * size) % len(pool)
            out[cell] = [pool[(start + j) % len(pool)] for j in range(size)]
        return out

    def batches(self) -> Iterable[dict[Cell, list[str]]]:
        for b in range(self.num_batches):
            yield self.groups(b)


def _shuffle_pools(members: Mapping[Cell, Sequence[str]], seed: int) -> dict[Cell, tuple[str, ...]]:
    rng = np.random.default_rng(seed)
    return {cell: tuple(members[cell][i] for i in rng.permutation(len(members[cell])))
            for cell in sorted(members)}


def plan_groups(manifest: Sequence[Sample], s: int = 24,
                class_counts: Mapping[Cell, int] | None = None,
                seed: int = 0, reform_period: int = 5) -> GroupPlan:
    members: dict[Cell, list[str]] = {}
    for smp in manifest:
        members.setdefault((smp.label, smp.modality), []).append(smp.id)
    for cell, ids in members.items():
        if len(ids) < MIN_GROUP:
            raise ConfigurationError(f"cell {cell} has {len(ids)} samples; need >= {MIN_GROUP}")
    counts = dict(class_counts) if class_counts is not None else {k: len(v) for k, v in members.items()}
    sizes = allocate(counts, s)
    for cell, n in sizes.items():
        if cell not in members:
            raise ConfigurationError(f"cell {cell} has an allocation but no samples")
        if n > len(members[cell]):
            raise ConfigurationError(
                f"cell {cell} needs groups of {n} but has only {len(members[cell])} samples")
    frozen = {k: tuple(sorted(v)) for k, v in members.items() if k in sizes}
    total = sum(len(v) for v in frozen.values())
    return GroupPlan(sizes=sizes, members=frozen, pools=_shuffle_pools(frozen, seed),
                     batch_budget=s, reform_period=reform_period, base_seed=seed,
                     seed=seed, num_batches=max(1, math.ceil(total / s)))


def reform(plan: GroupPlan, epoch: int) -> GroupPlan:
    """Reshuffle memberships at epochs that are multiples of the reform period."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch % plan.reform_period:
        return plan
    seed = plan.base_seed ^ (epoch // plan.reform_period)
    if seed == plan.seed:
        return plan
    return replace(plan, pools=_shuffle_pools(plan.members, seed), seed=seed)


@dataclass
class FeatureGroup:
    """Group features flattened to ``[L, d]``; row ``i*h*w + p`` is image ``i``,
    spatial position ``p`` (row-major over ``h x w``)."""

    label: int
    modality: str
    ids: list[str]
    features: Tensor
    h: int
    w: int
    pooled: Tensor | None = None
    extra: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.features.shape[0]


def flatten_group(features: Tensor) -> Tensor:
    n, d, h, w = features.shape
    return T.reshape(T.permute(features, (0, 2, 3, 1)), (n * h * w, d))


def unflatten_group(flat: Tensor, n: int, h: int, w: int) -> Tensor:
    d = flat.shape[1]
    return T.permute(T.reshape(flat, (n, h, w, d)), (0, 3, 1, 2))


def form_batch(groups: Mapping[Cell, Sequence[str]],
               outputs: Mapping[str, tuple[Sequence[str], Tensor]],
               pooled: Mapping[str, Tensor] | None = None) -> dict[Cell, FeatureGroup]:
    """Slice each modality's stacked ``[N,d,h,w]`` features into flattened groups.

    ``outputs`` maps modality -> (ids in stack order, feature tensor).
    """
    result = {}
    for (label, mod), ids in groups.items():
        if mod not in outputs:
            raise DataError(f"no features for modality {mod}")
        order, feats = outputs[mod]
        where = {sid: i for i, sid in enumerate(order)}
        idx = []
        for sid in ids:
            if sid not in where:
                raise DataError(f"missing feature for sample {sid}")
            idx.append(where[sid])
        idx = np.asarray(idx)
        sub = feats if len(idx) == feats.shape[0] and np.array_equal(idx, np.arange(len(idx))) \
            else T.take(feats, idx)
        _, _, h, w = feats.shape
        fg = FeatureGroup(label=label, modality=mod, ids=list(ids), features=flatten_group(sub),
                          h=h, w=w)
        if pooled is not None and mod in pooled:
            fg.pooled = T.take(pooled[mod], idx)
        result[(label, mod)] = fg
    return result
