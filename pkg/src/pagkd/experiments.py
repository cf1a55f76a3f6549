"""Cross-validation driver, ablation matrices and dataset sanity checks."""

from __future__ import annotations

import csv
import json
import logging
import time
import traceback
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import trainer
from .config import TrainConfig
from .gkd_den import BG, FG, tri_threshold
from .grouping import DataError, Sample
from .metrics import MetricsReport, compute_metrics
from .synthdata import DatasetQualityError, ImageStore

log = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "auc")


class ManifestError(DataError):
    pass


class ProtocolViolation(AssertionError):
    pass


# ----------------------------------------------------------------------------
# splits and teacher reuse


def fold_split(samples: Sequence[Sample], fold: int) -> tuple[list[Sample], list[Sample]]:
    """(train, test) for one fold.

    Train is every paired sample outside ``fold`` plus all unpaired samples;
    test is the WLI side of the paired samples in ``fold``.
    """
    paired = [s for s in samples if s.split == "paired"]
    if not paired or any(s.fold is None for s in paired):
        raise ManifestError("manifest has no fold assignment for paired samples")
    train = [s for s in samples if not (s.split == "paired" and s.fold == fold)]
    test = [s for s in paired if s.fold == fold and s.modality == "WLI"]
    if not test:
        raise ManifestError(f"paired test fold {fold} is empty")
    return train, test


def available_folds(samples: Sequence[Sample]) -> list[int]:
    return sorted({s.fold for s in samples if s.split == "paired" and s.fold is not None})


def _teacher_key(cfg: TrainConfig, fold: int) -> tuple:
    return (fold, cfg.seed, cfg.stages, cfg.image_size, cfg.layer_norm,
            tuple(getattr(cfg.teacher, f.name) for f in fields(cfg.teacher)))


class TeacherCache:
    """Pretrains one NBI teacher per (fold, seed, architecture) and hands out its weights."""

    def __init__(self):
        self._states: dict[tuple, dict[str, np.ndarray]] = {}
        self.train_acc: dict[tuple, float] = {}

    def get(self, store: ImageStore, train: Sequence[Sample], cfg: TrainConfig, fold: int,
            num_classes: int) -> dict[str, np.ndarray]:
        key = _teacher_key(cfg, fold)
        if key not in self._states:
            nbi = [s for s in train if s.modality == "NBI"]
            model, acc = trainer.pretrain_teacher(store, nbi, cfg, num_classes)
            self._states[key] = model.state_dict()
            self.train_acc[key] = acc
        return self._states[key]

    def __len__(self):
        return len(self._states)


# ----------------------------------------------------------------------------
# cross-validation


@dataclass
class CVReport:
    folds: dict[int, MetricsReport]
    mean: dict[str, float]
    std: dict[str, float]
    seed: int = 0
    seconds: float = 0.0

    def to_dict(self, roc: bool = False) -> dict:
        out = {"seed": self.seed, "mean": self.mean, "std": self.std, "seconds": self.seconds,
               "folds": {str(k): m.summary() for k, m in self.folds.items()},
               "auc_scheme": "macro one-vs-rest"}
        if roc:
            for k, m in self.folds.items():
                out["folds"][str(k)]["roc"] = {str(c): pts for c, pts in m.roc.items()}
        return out


def aggregate(reports: Mapping[int, MetricsReport]) -> tuple[dict[str, float], dict[str, float]]:
    mean, std = {}, {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in reports.values()], dtype=np.float64)
        mean[name] = float(vals.mean()) if vals.size else float("nan")
        std[name] = float(vals.std()) if vals.size else float("nan")
    return mean, std


def _audit_phase(store: ImageStore, phase: str, forbidden: Iterable[str]) -> None:
    leaked = store.accessed.get(phase, set()) & set(forbidden)
    if leaked:
        raise ProtocolViolation(f"{len(leaked)} test images read during {phase}: {sorted(leaked)[:3]}")


def run_fold(store: ImageStore, cfg: TrainConfig, fold: int, teachers: TeacherCache | None = None,
             log_path=None, checkpoint_dir=None) -> tuple[MetricsReport, trainer.TrainResult]:
    train, test = fold_split(store.samples, fold)
    num_classes = len({s.label for s in store.samples})
    test_ids = [s.id for s in test]
    # the held-out instance never reaches training in either modality
    held_out = {s.id for s in store.samples if s.split == "paired" and s.fold == fold}
    phase = f"train/fold{fold}/seed{cfg.seed}"
    store.phase = phase
    try:
        teacher_state = None
        if cfg.enable_pro or cfg.enable_den:
            teachers = teachers if teachers is not None else TeacherCache()
            teacher_state = teachers.get(store, train, cfg, fold, num_classes)
        result = trainer.train_distill(store, train, cfg, teacher_state, log_path=log_path,
                                       checkpoint_dir=checkpoint_dir)
    finally:
        store.phase = "idle"
    _audit_phase(store, phase, held_out)
    if any(store.by_id[i].split != "paired" for i in test_ids):
        raise ProtocolViolation("unpaired sample in a test fold")
    store.phase = f"test/fold{fold}"
    try:
        probs = trainer.predict(result.models.student, store, test_ids)
    finally:
        store.phase = "idle"
    return compute_metrics(probs, [s.label for s in test], num_classes), result


def run_cv(store: ImageStore, cfg: TrainConfig, folds: Sequence[int] | None = None,
           teachers: TeacherCache | None = None) -> CVReport:
    """Train and evaluate ``cfg`` on each fold; mean and std over folds."""
    folds = list(folds) if folds is not None else available_folds(store.samples)
    if not folds:
        raise ManifestError("manifest has no folds")
    teachers = teachers if teachers is not None else TeacherCache()
    start = time.perf_counter()
    reports = {}
    for k in folds:
        reports[k], _ = run_fold(store, cfg, k, teachers)
        log.info("fold %d seed %d auc %.4f", k, cfg.seed, reports[k].auc)
    mean, std = aggregate(reports)
    return CVReport(reports, mean, std, seed=cfg.seed, seconds=time.perf_counter() - start)


# ----------------------------------------------------------------------------
# ablation matrices


@dataclass
class ExperimentMatrix:
    """Named config variants, each given as the flags it changes relative to ``base``."""

    name: str
    base: TrainConfig
    variants: list[tuple[str, dict]] = field(default_factory=list)

    def configs(self) -> list[tuple[str, dict, TrainConfig]]:
        out = []
        base = self.base.to_dict()
        for name, flags in self.variants:
            cfg = self.base.updated(**flags)
            changed = {k for k, v in cfg.to_dict().items() if v != base[k]}
            extra = changed - set(flags)
            if extra:
                raise ValueError(f"variant {name} changes unnamed fields {sorted(extra)}")
            out.append((name, dict(flags), cfg))
        return out

    def flag_columns(self) -> list[str]:
        cols: list[str] = []
        for _, flags in self.variants:
            cols += [k for k in flags if k not in cols]
        return cols


def components_matrix(base: TrainConfig) -> ExperimentMatrix:
    return ExperimentMatrix("components", base, [
        ("baseline", dict(enable_pro=False, enable_den=False)),
        ("pro-only", dict(enable_pro=True, enable_den=False)),
        ("den-only", dict(enable_pro=False, enable_den=True)),
        ("full", dict(enable_pro=True, enable_den=True)),
    ])


def pairing_matrix(base: TrainConfig) -> ExperimentMatrix:
    return ExperimentMatrix("pairing", base, [
        ("group-joint", dict(pairing_mode="group")),
        ("image-joint", dict(pairing_mode="image")),
        ("mixed-joint", dict(pairing_mode="mixed")),
    ])


def subcomponent_matrix(base: TrainConfig) -> ExperimentMatrix:
    return ExperimentMatrix("subcomponents", base, [
        ("full", {}),
        ("no-qformer", dict(use_qformer=False)),
        ("no-srca-mask", dict(use_srca=False)),
        ("unidirectional", dict(bidirectional=False)),
        ("no-refinement", dict(refinement="identity")),
    ])


TAU1_GRID = (0.1, 0.2, 0.3, 0.4, 0.5)
TAU2_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)


def tau_sweep(base: TrainConfig) -> ExperimentMatrix:
    variants = [(f"tau1={t}", dict(tau1=t, tau2=0.7)) for t in TAU1_GRID]
    variants += [(f"tau2={t}", dict(tau1=0.3, tau2=t)) for t in TAU2_GRID if t != 0.7]
    return ExperimentMatrix("tau", base.updated(tau1=0.3, tau2=0.7), variants)


def nq_sweep(base: TrainConfig, values=(1, 4, 8, 12, 16)) -> ExperimentMatrix:
    return ExperimentMatrix("num_queries", base, [(f"nq={v}", dict(num_queries=v)) for v in values])


def s_sweep(base: TrainConfig, values=(12, 24, 36)) -> ExperimentMatrix:
    return ExperimentMatrix("batch_size", base, [(f"s={v}", dict(batch_size=v)) for v in values])


PRESETS = {"components": components_matrix, "pairing": pairing_matrix, "subcomponents": subcomponent_matrix,
           "tau": tau_sweep, "nq": nq_sweep, "s": s_sweep}


@dataclass
class MatrixRow:
    variant: str
    seed: int
    flags: dict
    status: str = "ok"
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    folds: dict = field(default_factory=dict)
    error: str = ""
    seconds: float = 0.0


@dataclass
class MatrixResult:
    name: str
    rows: list[MatrixRow]
    trend: dict

    def to_dict(self) -> dict:
        return {"matrix": self.name, "trend": self.trend,
                "rows": [vars(r) for r in self.rows]}


def trend_summary(rows: Sequence[MatrixRow], metric: str = "auc") -> dict:
    """Per-variant mean/std of ``metric`` across seeds, best first."""
    by_variant: dict[str, list[float]] = {}
    for r in rows:
        if r.status == "ok":
            by_variant.setdefault(r.variant, []).append(r.mean[metric])
    summary = {v: {"mean": float(np.mean(x)), "std": float(np.std(x)), "seeds": len(x)}
               for v, x in by_variant.items()}
    order = sorted(summary, key=lambda v: -summary[v]["mean"])
    return {"metric": metric, "variants": summary, "ranking": order,
            "failed": sorted({r.variant for r in rows if r.status != "ok"})}


def run_matrix(store: ImageStore, matrix: ExperimentMatrix, seeds: Sequence[int] = (0,),
               folds: Sequence[int] | None = None, out_dir=None,
               teachers: TeacherCache | None = None) -> MatrixResult:
    """One CV run per (variant, seed). Failures become rows with status ``failed``."""
    teachers = teachers if teachers is not None else TeacherCache()
    configs = matrix.configs()
    rows = []
    for seed in seeds:
        for name, flags, cfg in configs:
            cfg = cfg.updated(seed=seed)
            row = MatrixRow(name, seed, flags)
            try:
                rep = run_cv(store, cfg, folds, teachers)
                row.mean, row.std, row.seconds = rep.mean, rep.std, rep.seconds
                row.folds = {str(k): m.summary() for k, m in rep.folds.items()}
            except Exception as exc:        # recorded per row, the matrix continues
                row.status = "failed"
                row.error = f"{type(exc).__name__}: {exc}"
                log.warning("variant %s seed %d failed\n%s", name, seed, traceback.format_exc())
            rows.append(row)
    result = MatrixResult(matrix.name, rows, trend_summary(rows))
    if out_dir is not None:
        write_matrix(result, matrix, out_dir)
    return result


def write_matrix(result: MatrixResult, matrix: ExperimentMatrix, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flag_cols = matrix.flag_columns()
    base = matrix.base.to_dict()
    csv_path = out / f"{matrix.name}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", *flag_cols, *(f"{m}_mean" for m in METRIC_NAMES),
                    *(f"{m}_std" for m in METRIC_NAMES), "status", "error"])
        for r in result.rows:
            w.writerow([r.variant, r.seed, *(r.flags.get(c, base[c]) for c in flag_cols),
                        *(r.mean.get(m, "") for m in METRIC_NAMES),
                        *(r.std.get(m, "") for m in METRIC_NAMES), r.status, r.error])
    json_path = out / f"{matrix.name}.json"
    json_path.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


# ----------------------------------------------------------------------------
# diagnostics


def threshold_grid(cams: np.ndarray, tau1s: Sequence[float] = TAU1_GRID,
                   tau2s: Sequence[float] = TAU2_GRID) -> list[dict]:
    """FG/BG/ambiguous position counts of fixed CAMs at every valid (tau1, tau2)."""
    rows = []
    for t1 in tau1s:
        for t2 in tau2s:
            if not t1 < t2:
                continue
            lab = tri_threshold(cams, t1, t2)
            rows.append({"tau1": t1, "tau2": t2, "fg": int((lab == FG).sum()),
                         "bg": int((lab == BG).sum()), "amb": int(lab.size - (lab == FG).sum() - (lab == BG).sum())})
    return rows


@dataclass
class GapReport:
    nbi_auc: float
    wli_auc: float
    margin: float
    passed: bool


def verify_gap(store: ImageStore, cfg: TrainConfig, fold: int = 0, margin: float = 0.05,
               raise_on_fail: bool = True) -> GapReport:
    """Train the same small classifier on NBI-only and WLI-only data and compare test AUC."""
    train, _ = fold_split(store.samples, fold)
    num_classes = len({s.label for s in store.samples})
    test = {m: [s for s in store.samples if s.split == "paired" and s.fold == fold and s.modality == m]
            for m in ("NBI", "WLI")}
    auc = {}
    for mod in ("NBI", "WLI"):
        model, _ = trainer.train_classifier(store, [s for s in train if s.modality == mod], cfg,
                                            cfg.teacher, "teacher", num_classes)
        probs = trainer.predict(model, store, [s.id for s in test[mod]])
        auc[mod] = compute_metrics(probs, [s.label for s in test[mod]], num_classes).auc
    rep = GapReport(auc["NBI"], auc["WLI"], margin, auc["NBI"] - auc["WLI"] >= margin)
    if not rep.passed and raise_on_fail:
        raise DatasetQualityError(
            f"NBI AUC {rep.nbi_auc:.3f} does not exceed WLI AUC {rep.wli_auc:.3f} by {margin}; "
            "regenerate with a larger gap")
    return rep


def param_counts(cfg: TrainConfig, num_classes: int = 3) -> dict[str, int]:
    """Extra parameters introduced by the distillation heads (student excluded)."""
    models = trainer.build_models(cfg.updated(enable_pro=True, enable_den=True, use_qformer=True),
                                  num_classes, None)
    return {"qformer": sum(p.data.size for p in models.qformer.parameters()),
            "srca": sum(p.data.size for p in models.srca.parameters())}

