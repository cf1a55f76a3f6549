"""Command-line entry point: ``pagkd <subcommand> ...``.

Training flags mirror :class:`TrainConfig` field names (``--tau1 0.4``,
``--no-enable-den``). A ``--config`` YAML file is applied after the flags, so
its values win. ``PAGKD_SEED`` supplies the default seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import MISSING, fields
from pathlib import Path

import numpy as np

from . import archive, experiments, gradsuite, trainer
from .config import DESK, TrainConfig, dump
from .config import load as load_config
from .gkd_den import build_relation, tri_threshold
from .grouping import plan_groups
from .metrics import compute_metrics
from .synthdata import ImageStore, SynthConfig, generate

log = logging.getLogger("pagkd")

PRESETS = {"desk": DESK, "full": TrainConfig()}
_SKIP = {"teacher"}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config")
    g.add_argument("--preset", choices=sorted(PRESETS), default="desk",
                   help="base config before flags and --config are applied (default: desk)")
    g.add_argument("--config", type=Path, help="YAML file of TrainConfig fields; overrides flags")
    for f in fields(TrainConfig):
        if f.name in _SKIP:
            continue
        flag = "--" + f.name.replace("_", "-")
        default = f.default if f.default is not MISSING else None
        if isinstance(default, bool):
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(default, tuple):
            g.add_argument(flag, dest=f.name, type=int, nargs="+", default=None)
        else:
            g.add_argument(flag, dest=f.name, type=type(default), default=None)
    g.add_argument("--teacher-epochs", type=int, default=None)
    g.add_argument("--teacher-lr", type=float, default=None)


def build_config(args: argparse.Namespace) -> TrainConfig:
    cfg = PRESETS[args.preset]
    changes = {f.name: getattr(args, f.name) for f in fields(TrainConfig)
               if f.name not in _SKIP and getattr(args, f.name, None) is not None}
    if "seed" not in changes and os.environ.get("PAGKD_SEED"):
        changes["seed"] = int(os.environ["PAGKD_SEED"])
    teacher = {k: v for k, v in (("epochs", args.teacher_epochs), ("lr", args.teacher_lr)) if v is not None}
    if teacher:
        changes["teacher"] = teacher
    cfg = cfg.updated(**changes)
    if args.config:
        cfg = load_config(args.config, base=cfg)
    return cfg


def _store(args) -> ImageStore:
    return ImageStore(args.data)


def _num_classes(store: ImageStore) -> int:
    return len({s.label for s in store.samples})


def _dump(obj, path: Path | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n")
    print(text)


# ----------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    seed = args.seed if args.seed is not None else int(os.environ.get("PAGKD_SEED", 0))
    cfg = SynthConfig(classes=args.classes, per_class=args.per_class, pairing=args.pairing,
                      gap=args.gap, seed=seed)
    samples = generate(args.out, cfg)
    print(f"wrote {len(samples)} images to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = build_config(args)
    store = _store(args)
    train, _ = experiments.fold_split(store.samples, cfg.fold)
    model, acc = trainer.pretrain_teacher(store, [s for s in train if s.modality == "NBI"], cfg,
                                          _num_classes(store))
    archive.save(args.out, model.state_dict())
    print(f"teacher train accuracy {acc:.4f}; saved {args.out} (sha256 {archive.digest(model.state_dict())[:12]})")
    return 0


def cmd_distill(args) -> int:
    cfg = build_config(args)
    store = _store(args)
    train, _ = experiments.fold_split(store.samples, cfg.fold)
    teacher_state = archive.load(args.teacher) if args.teacher else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump(cfg, out / "config.yaml")
    result = trainer.train_distill(store, train, cfg, teacher_state, log_path=out / "steps.jsonl",
                                   checkpoint_dir=out / "checkpoints")
    archive.save(out / "student.pgkd", result.models.student.state_dict())
    last = result.reports[-1]
    print(f"done: {len(result.reports)} steps, final L_total {last.l_total:.4f}; "
          f"audit violations {result.audit.violations}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = build_config(args)
    store = _store(args)
    _, test = experiments.fold_split(store.samples, cfg.fold)
    probs = trainer.run_inference(args.checkpoint, cfg, _num_classes(store), store, [s.id for s in test])
    rep = compute_metrics(probs, [s.label for s in test], _num_classes(store))
    _dump({**rep.summary(), "roc": {str(c): v for c, v in rep.roc.items()}}, args.out)
    return 0


def cmd_run_cv(args) -> int:
    cfg = build_config(args)
    rep = experiments.run_cv(_store(args), cfg, args.folds)
    _dump(rep.to_dict(roc=True), args.out)
    return 0


def cmd_run_matrix(args) -> int:
    cfg = build_config(args)
    matrix = experiments.PRESETS[args.matrix](cfg)
    res = experiments.run_matrix(_store(args), matrix, args.seeds, args.folds, out_dir=args.out)
    print(json.dumps(res.trend, indent=2))
    return 1 if res.trend["failed"] else 0


def cmd_gradcheck(args) -> int:
    res = gradsuite.run(args.seeds)
    for name, err in res.worst.items():
        print(f"{name:28s} {err:.3e} {'ok' if err < args.tol else 'FAIL'}")
    print(f"{res.seeds} seeds in {res.seconds:.1f}s; worst {res.max_error:.3e}")
    return 0 if res.max_error < args.tol else 1


def cmd_inspect(args) -> int:
    """Dump per-class relation statistics for the first batches of a fold."""
    cfg = build_config(args)
    store = _store(args)
    train, _ = experiments.fold_split(store.samples, cfg.fold)
    n_cls = _num_classes(store)
    teacher = trainer.Backbone(cfg.backbone(n_cls), prefix="teacher")
    teacher.load_state_dict(archive.load(args.teacher))
    student = trainer.Backbone(cfg.backbone(n_cls), seed=trainer.module_seeds(cfg.seed)["student"],
                               prefix="student")
    if args.student:
        student.load_state_dict({k: v for k, v in archive.load(args.student).items()
                                 if k.startswith("student.")})
    plan = plan_groups(train, cfg.batch_size, seed=cfg.seed, reform_period=cfg.reform_period)
    rows, all_cams = [], []
    for b in range(min(args.batches, plan.num_batches)):
        groups = plan.groups(b)
        cams = {}
        for mod, model in (("WLI", student), ("NBI", teacher)):
            side = trainer._side(store, groups, mod, model)
            labels = np.array([store.by_id[s].label for s in side.ids])
            cams.update(zip(side.ids, trainer._cams(side, labels, cfg)))
        all_cams.extend(cams.values())
        for (c, mod), ids in sorted(groups.items()):
            if mod != "WLI":
                continue
            cw = np.concatenate([cams[i].reshape(-1) for i in ids])
            cn = np.concatenate([cams[i].reshape(-1) for i in groups[(c, "NBI")]])
            rel = build_relation(tri_threshold(cw, cfg.tau1, cfg.tau2), tri_threshold(cn, cfg.tau1, cfg.tau2))
            rows.append({"batch": b, "class": c, **rel.stats})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "relations.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    grid = experiments.threshold_grid(np.stack(all_cams))
    with open(out / "threshold_grid.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(grid[0]))
        w.writeheader()
        w.writerows(grid)
    print(f"wrote {len(rows)} relation rows and {len(grid)} grid points to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pagkd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="render the synthetic WLI/NBI dataset")
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--per-class", type=int, default=120)
    g.add_argument("--pairing", type=float, default=0.4)
    g.add_argument("--gap", type=float, default=SynthConfig.gap)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_generate)

    def data_cmd(name, func, help):
        s = sub.add_parser(name, help=help)
        s.add_argument("--data", type=Path, required=True, help="dataset directory (manifest.csv)")
        _add_train_flags(s)
        s.set_defaults(func=func)
        return s

    s = data_cmd("pretrain-teacher", cmd_pretrain, "train the NBI teacher on one fold's train split")
    s.add_argument("--out", type=Path, required=True)
    s = data_cmd("distill", cmd_distill, "distil into the WLI student on one fold")
    s.add_argument("--teacher", type=Path, help="teacher checkpoint (needed unless both heads are off)")
    s.add_argument("--out", type=Path, required=True)
    s = data_cmd("evaluate", cmd_evaluate, "evaluate a student checkpoint on a fold's WLI test set")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--out", type=Path)
    s = data_cmd("run-cv", cmd_run_cv, "5-fold cross-validation of one config")
    s.add_argument("--folds", type=int, nargs="+")
    s.add_argument("--out", type=Path)
    s = data_cmd("run-matrix", cmd_run_matrix, "ablation matrix (CSV + JSON + trend summary)")
    s.add_argument("--matrix", choices=sorted(experiments.PRESETS), required=True)
    s.add_argument("--seeds", type=int, nargs="+", default=[0])
    s.add_argument("--folds", type=int, nargs="+")
    s.add_argument("--out", type=Path, required=True)
    s = data_cmd("inspect-relations", cmd_inspect, "dump relation-matrix statistics as CSV")
    s.add_argument("--teacher", type=Path, required=True)
    s.add_argument("--student", type=Path)
    s.add_argument("--batches", type=int, default=5)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and loss head")
    s.add_argument("--seeds", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
