"""Teacher pretraining, the distillation loop and WLI-only inference."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import archive
from . import tensor as T
from .backbone import Backbone, ClassifierOutput, freeze, normalize_cam
from .config import TeacherConfig, TrainConfig
from .gkd_den import SRCA, AttentionAudit, DenseTerm, build_relation, dense_loss, refine_cam, tri_threshold
from .gkd_pro import QFormer, contrastive_loss, pooled_query_set
from .grouping import Cell, FeatureGroup, Sample, form_batch, plan_groups, reform
from .synthdata import ImageStore
from .tensor import AdamState, Tape, Tensor

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, report: "StepReport"):
        super().__init__(message)
        self.report = report


class LoadError(KeyError):
    pass


@dataclass
class StepReport:
    epoch: int
    step: int
    l_pro: float = 0.0
    l_den: float = 0.0
    l_cls: float = 0.0
    l_total: float = 0.0
    grad_norms: dict = field(default_factory=dict)
    relation_stats: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Models:
    student: Backbone
    teacher: Backbone | None = None
    qformer: QFormer | None = None
    srca: SRCA | None = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for m in (self.student, self.teacher, self.qformer, self.srca):
            if m is not None:
                state.update(m.state_dict())
        return state


def module_seeds(seed: int) -> dict[str, int]:
    """Independent init seeds so enabling a module never shifts another's weights."""
    children = np.random.SeedSequence(seed).spawn(4)
    names = ("student", "teacher", "qformer", "srca")
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def build_models(cfg: TrainConfig, num_classes: int, teacher_state: Mapping[str, np.ndarray] | None) -> Models:
    seeds = module_seeds(cfg.seed)
    bcfg = cfg.backbone(num_classes)
    models = Models(student=Backbone(bcfg, seed=seeds["student"], prefix="student"))
    if teacher_state is not None:
        teacher = Backbone(bcfg, seed=seeds["teacher"], prefix="teacher")
        teacher.load_state_dict(teacher_state)
        models.teacher = freeze(teacher)
    if cfg.enable_pro and cfg.use_qformer:
        models.qformer = QFormer(bcfg.d, cfg.num_queries, cfg.qformer_blocks, seed=seeds["qformer"])
    if cfg.enable_den:
        models.srca = SRCA(bcfg.d, seed=seeds["srca"])
    return models


def trainable(models: Models) -> list[Tensor]:
    params = models.student.parameters()
    for m in (models.qformer, models.srca):
        if m is not None:
            params += m.parameters()
    return params


# ----------------------------------------------------------------------------
# losses


def classification_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Class-balanced cross-entropy: mean over classes of the per-class mean CE."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise IndexError(f"label outside [0, {logits.shape[1]})")
    present, counts = np.unique(labels, return_counts=True)
    per_class = dict(zip(present.tolist(), counts.tolist()))
    weights = np.array([1.0 / (len(present) * per_class[int(y)]) for y in labels])
    return T.sum(T.cross_entropy(logits, labels) * weights)


# ----------------------------------------------------------------------------
# one distillation step


@dataclass
class _Side:
    ids: list[str]
    out: ClassifierOutput
    images: np.ndarray
    cams: np.ndarray | None = None


def _side(store: ImageStore, groups: Mapping[Cell, Sequence[str]], mod: str, model: Backbone) -> _Side:
    ids = [sid for (c, m), g in sorted(groups.items()) if m == mod for sid in g]
    images = store.stack(ids)
    return _Side(ids, model.forward(images), images)


def _cams(side: _Side, labels: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    feats = side.out.features.data
    w = side.out.fc_weights.data[labels]                      # [N, d]
    raw = np.einsum("ndxy,nd->nxy", feats, w)
    cam = normalize_cam(raw)
    if cfg.refinement == "pixel-adaptive":
        cam = refine_cam(cam, side.images, cfg.refine_iters, cfg.sigma_c, cfg.sigma_s,
                         cfg.refine_include_self)
        # smoothing shrinks the range; thresholds are defined on [0, 1]
        cam = normalize_cam(cam)
    return cam


@dataclass
class _Unit:
    """Matched WLI/NBI feature groups for one class inside one distillation unit."""

    wli: FeatureGroup
    nbi: FeatureGroup
    cam_wli: np.ndarray
    cam_nbi: np.ndarray


def _image_slice(fg: FeatureGroup, i: int) -> FeatureGroup:
    hw = fg.h * fg.w
    sub = FeatureGroup(fg.label, fg.modality, [fg.ids[i]],
                       T.take(fg.features, slice(i * hw, (i + 1) * hw)), fg.h, fg.w)
    if fg.pooled is not None:
        sub.pooled = T.take(fg.pooled, slice(i, i + 1))
    return sub


def _subgroup(fg: FeatureGroup, keep: Sequence[int]) -> FeatureGroup:
    hw = fg.h * fg.w
    rows = np.concatenate([np.arange(i * hw, (i + 1) * hw) for i in keep])
    sub = FeatureGroup(fg.label, fg.modality, [fg.ids[i] for i in keep],
                       T.take(fg.features, rows), fg.h, fg.w)
    if fg.pooled is not None:
        sub.pooled = T.take(fg.pooled, np.asarray(keep))
    return sub


def _cam_rows(cams: Mapping[str, np.ndarray], ids: Sequence[str]) -> np.ndarray:
    return np.concatenate([cams[i].reshape(-1) for i in ids])


def _pairs(wli: FeatureGroup, nbi: FeatureGroup, rng: np.random.Generator,
           store: ImageStore) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """True pairs present in both groups, then the leftover indices of each side."""
    pid = {store.by_id[s].pair_id: j for j, s in enumerate(nbi.ids) if store.by_id[s].pair_id}
    true = []
    for i, s in enumerate(wli.ids):
        p = store.by_id[s].pair_id
        if p is not None and p in pid:
            true.append((i, pid.pop(p)))
    used_w = {i for i, _ in true}
    used_n = {j for _, j in true}
    rest_w = [i for i in range(len(wli.ids)) if i not in used_w]
    rest_n = [j for j in range(len(nbi.ids)) if j not in used_n]
    return true, rest_w, [rest_n[k] for k in rng.permutation(len(rest_n))]


def _units(feat_groups: Mapping[Cell, FeatureGroup], cams: Mapping[str, np.ndarray],
           cfg: TrainConfig, rng: np.random.Generator, store: ImageStore) -> list[dict[int, _Unit]]:
    """Split the batch into distillation units according to the pairing mode.

    ``group``: one unit holding every class's full groups. ``image``: unit ``j``
    holds the ``j``-th WLI/NBI image pair of every class (true pairs first,
    then random same-class pairings). ``mixed``: true pairs at image level,
    the unpaired remainder as one group-level unit.
    """
    classes = sorted({c for c, _ in feat_groups})

    def unit(c, w, n):
        return _Unit(w, n, _cam_rows(cams, w.ids), _cam_rows(cams, n.ids))

    if cfg.pairing_mode == "group":
        return [{c: unit(c, feat_groups[(c, "WLI")], feat_groups[(c, "NBI")]) for c in classes}]
    per_class = {}
    for c in classes:
        w, n = feat_groups[(c, "WLI")], feat_groups[(c, "NBI")]
        true, rest_w, rest_n = _pairs(w, n, rng, store)
        per_class[c] = (w, n, true, rest_w, rest_n)
    out: list[dict[int, _Unit]] = []
    if cfg.pairing_mode == "image":
        lists = {}
        for c, (w, n, true, rest_w, rest_n) in per_class.items():
            lists[c] = true + list(zip(rest_w, rest_n))
        depth = min(len(v) for v in lists.values())
        for j in range(depth):
            out.append({c: unit(c, _image_slice(per_class[c][0], lists[c][j][0]),
                                 _image_slice(per_class[c][1], lists[c][j][1])) for c in classes})
        return out
    # mixed
    depth = min(len(v[2]) for v in per_class.values())
    for j in range(depth):
        out.append({c: unit(c, _image_slice(v[0], v[2][j][0]), _image_slice(v[1], v[2][j][1]))
                    for c, v in per_class.items()})
    rest = {}
    for c, (w, n, true, rest_w, rest_n) in per_class.items():
        keep_w = rest_w + [i for i, _ in true[depth:]]
        keep_n = rest_n + [k for _, k in true[depth:]]
        if not keep_w or not keep_n:
            rest = {}
            break
        rest[c] = unit(c, _subgroup(w, sorted(keep_w)), _subgroup(n, sorted(keep_n)))
    if rest:
        out.append(rest)
    return out


def _mean(xs: Sequence[Tensor]) -> Tensor:
    return T.sum(T.concat([T.reshape(x, (1,)) for x in xs])) * (1.0 / len(xs))


def _grad_norm(params: Sequence[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))


def distill_step(store: ImageStore, groups: Mapping[Cell, Sequence[str]], models: Models,
                 cfg: TrainConfig, opt: AdamState, epoch: int = 0, step: int = 0,
                 audit: AttentionAudit | None = None,
                 rng: np.random.Generator | None = None) -> StepReport:
    """Forward both branches, combine the enabled losses, backprop, and update."""
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, epoch, step])
    report = StepReport(epoch=epoch, step=step)
    distill = cfg.enable_pro or cfg.enable_den
    if distill and models.teacher is None:
        raise ValueError("distillation enabled but no teacher was provided")
    with Tape() as tape:
        wli = _side(store, groups, "WLI", models.student)
        labels = np.array([store.by_id[s].label for s in wli.ids])
        l_cls = classification_loss(wli.out.logits, labels)
        total = l_cls
        l_pro = l_den = None
        if distill:
            nbi = _side(store, groups, "NBI", models.teacher)
            nbi_labels = np.array([store.by_id[s].label for s in nbi.ids])
            feat_groups = form_batch(
                {k: v for k, v in groups.items()},
                {"WLI": (wli.ids, wli.out.features), "NBI": (nbi.ids, nbi.out.features)},
                pooled={"WLI": wli.out.pooled, "NBI": nbi.out.pooled})
            cams = {}
            if cfg.enable_den:
                for side, lab in ((wli, labels), (nbi, nbi_labels)):
                    for sid, cam in zip(side.ids, _cams(side, lab, cfg)):
                        cams[sid] = cam
            else:
                for side in (wli, nbi):
                    h, w = side.out.features.shape[2:]
                    for sid in side.ids:
                        cams[sid] = np.zeros((h, w))
            units = _units(feat_groups, cams, cfg, rng, store)
            if not units:
                raise ValueError("pairing mode produced no distillation units for this batch")
            if cfg.enable_pro:
                losses = []
                for u in units:
                    sets = {}
                    for c, cu in u.items():
                        for mod, fg in (("WLI", cu.wli), ("NBI", cu.nbi)):
                            if cfg.use_qformer:
                                sets[(c, mod)] = models.qformer(fg.features, fg.h, fg.w)
                            else:
                                sets[(c, mod)] = pooled_query_set(fg.pooled)
                    losses.append(contrastive_loss(sets, exclude_positive=cfg.exclude_positive))
                l_pro = _mean(losses)
                total = total + l_pro
            if cfg.enable_den:
                losses = []
                for u in units:
                    terms = []
                    for c, cu in sorted(u.items()):
                        rel = build_relation(tri_threshold(cu.cam_wli, cfg.tau1, cfg.tau2),
                                             tri_threshold(cu.cam_nbi, cfg.tau1, cfg.tau2))
                        report.relation_stats.append({
                            "class": c, "fg_frac_wli": rel.stats["fg_frac_row"],
                            "fg_frac_nbi": rel.stats["fg_frac_col"], "amb_frac": rel.stats["amb_frac"],
                            "matched_frac": rel.stats["matched_frac"],
                            "all_masked_rows": rel.stats["all_masked_rows"]})
                        bias = rel.bias if cfg.use_srca else None
                        bias_t = rel.bias.T if cfg.use_srca else None
                        n2w = models.srca.reconstruct(cu.nbi.features, cu.wli.features, bias, audit)
                        w2n = None
                        if cfg.bidirectional:
                            w2n = models.srca.reconstruct(cu.wli.features, cu.nbi.features, bias_t, audit)
                        terms.append(DenseTerm(cu.wli.features, cu.nbi.features, n2w, w2n))
                    losses.append(dense_loss(terms, cfg.norm_mode, cfg.bidirectional))
                l_den = _mean(losses)
                total = total + l_den
    report.l_cls = float(l_cls.data)
    report.l_pro = float(l_pro.data) if l_pro is not None else 0.0
    report.l_den = float(l_den.data) if l_den is not None else 0.0
    report.l_total = float(total.data)
    if not all(math.isfinite(v) for v in (report.l_cls, report.l_pro, report.l_den, report.l_total)):
        raise TrainingAborted(f"non-finite loss at epoch {epoch} step {step}", report)
    tape.backward(total)
    report.grad_norms = {"student": _grad_norm(models.student.parameters())}
    if models.qformer is not None:
        report.grad_norms["qformer"] = _grad_norm(models.qformer.parameters())
    if models.srca is not None:
        report.grad_norms["srca"] = _grad_norm(models.srca.parameters())
    T.adam_step(trainable(models), opt)
    return report


# ----------------------------------------------------------------------------
# loops


@dataclass
class TrainResult:
    models: Models
    reports: list[StepReport]
    audit: AttentionAudit


def train_distill(store: ImageStore, train: Sequence[Sample], cfg: TrainConfig,
                  teacher_state: Mapping[str, np.ndarray] | None, log_path=None,
                  checkpoint_dir=None, audit: AttentionAudit | None = None) -> TrainResult:
    classes = sorted({s.label for s in train})
    models = build_models(cfg, len(classes), teacher_state)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    audit = audit if audit is not None else AttentionAudit()
    plan = plan_groups(train, cfg.batch_size, seed=cfg.seed, reform_period=cfg.reform_period)
    reports: list[StepReport] = []
    fh = open(log_path, "w") if log_path else None
    try:
        step = 0
        for epoch in range(cfg.epochs):
            plan = reform(plan, epoch)
            for groups in plan.batches():
                rep = distill_step(store, groups, models, cfg, opt, epoch, step, audit)
                reports.append(rep)
                if fh:
                    fh.write(rep.to_json() + "\n")
                step += 1
            if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                archive.save(Path(checkpoint_dir) / f"epoch{epoch + 1:03d}.pgkd", models.state_dict())
    finally:
        if fh:
            fh.close()
    return TrainResult(models, reports, audit)


def train_plain_ce(store: ImageStore, train: Sequence[Sample], cfg: TrainConfig) -> list[float]:
    """Reference WLI-only cross-entropy trainer over the same group schedule.

    Returns the per-step loss trace.
    """
    classes = sorted({s.label for s in train})
    seeds = module_seeds(cfg.seed)
    student = Backbone(cfg.backbone(len(classes)), seed=seeds["student"], prefix="student")
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    plan = plan_groups(train, cfg.batch_size, seed=cfg.seed, reform_period=cfg.reform_period)
    trace = []
    for epoch in range(cfg.epochs):
        plan = reform(plan, epoch)
        for groups in plan.batches():
            ids = [sid for (c, m), g in sorted(groups.items()) if m == "WLI" for sid in g]
            with Tape() as tape:
                logits = student.forward(store.stack(ids)).logits
                loss = classification_loss(logits, [store.by_id[i].label for i in ids])
            tape.backward(loss)
            T.adam_step(student.parameters(), opt)
            trace.append(float(loss.data))
    return trace


def pretrain_teacher(store: ImageStore, nbi_train: Sequence[Sample], cfg: TrainConfig,
                     num_classes: int | None = None) -> tuple[Backbone, float]:
    """Plain minibatch cross-entropy on NBI images. Returns (teacher, train accuracy)."""
    if not nbi_train:
        raise ValueError("NBI training split is empty")
    return train_classifier(store, nbi_train, cfg, cfg.teacher, "teacher", num_classes)


def train_classifier(store: ImageStore, samples: Sequence[Sample], cfg: TrainConfig,
                     tcfg: TeacherConfig, prefix: str = "teacher",
                     num_classes: int | None = None) -> tuple[Backbone, float]:
    if not samples:
        raise ValueError("training split is empty")
    n_cls = num_classes or (max(s.label for s in samples) + 1)
    model = Backbone(cfg.backbone(n_cls), seed=module_seeds(cfg.seed)[prefix if prefix in
                     ("student", "teacher") else "teacher"], prefix=prefix)
    opt = AdamState(lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    ids = sorted(s.id for s in samples)
    labels = {s.id: s.label for s in samples}
    rng = np.random.default_rng([cfg.seed, 7])
    for _ in range(tcfg.epochs):
        order = [ids[i] for i in rng.permutation(len(ids))]
        for start in range(0, len(order), tcfg.batch_size):
            chunk = order[start:start + tcfg.batch_size]
            with Tape() as tape:
                logits = model.forward(store.stack(chunk)).logits
                loss = T.mean(T.cross_entropy(logits, [labels[i] for i in chunk]))
            tape.backward(loss)
            T.adam_step(model.parameters(), opt)
    probs = predict(model, store, ids)
    acc = float(np.mean(probs.argmax(axis=1) == np.array([labels[i] for i in ids])))
    return model, acc


def predict(model: Backbone, store: ImageStore, ids: Sequence[str], batch: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(ids), batch):
        logits = model.forward(store.stack(ids[start:start + batch])).logits
        out.append(T.softmax(logits).data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.num_classes))


def run_inference(checkpoint, cfg: TrainConfig, num_classes: int, store: ImageStore,
                  ids: Sequence[str], batch: int = 64) -> np.ndarray:
    """Class probabilities for WLI images using only the ``student.*`` weights."""
    state = archive.load(checkpoint) if isinstance(checkpoint, (str, Path)) else dict(checkpoint)
    student = Backbone(cfg.backbone(num_classes), prefix="student")
    missing = [k for k in student.params if k not in state]
    if missing:
        raise LoadError(f"checkpoint lacks student parameters: {missing}")
    student.load_state_dict({k: v for k, v in state.items() if k.startswith("student.")})
    return predict(student, store, ids, batch)
