import csv
import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pagkd import trainer
from pagkd.config import DESK
from pagkd.experiments import (ExperimentMatrix, ManifestError, ProtocolViolation, TeacherCache,
                               available_folds, components_matrix, fold_split, pairing_matrix, param_counts,
                               run_cv, run_fold, run_matrix, subcomponent_matrix, tau_sweep, threshold_grid)
from pagkd.gkd_den import srca_param_count
from pagkd.gkd_pro import qformer_param_count
from pagkd.synthdata import ImageStore

TINY = DESK.updated(epochs=1, teacher=dict(epochs=3))


def test_fold_split_protocol(small_store):
    assert available_folds(small_store.samples) == [0, 1, 2, 3, 4]
    for k in range(5):
        train, test = fold_split(small_store.samples, k)
        assert all(s.modality == "WLI" and s.split == "paired" and s.fold == k for s in test)
        held = {s.pair_id for s in test}
        assert not any(s.pair_id in held for s in train if s.pair_id)
        assert all(s in train for s in small_store.samples if s.split == "unpaired")


def test_missing_fold_is_manifest_error(small_store):
    with pytest.raises(ManifestError):
        fold_split(small_store.samples, 7)
    bare = [dataclasses.replace(s, fold=None) for s in small_store.samples]
    with pytest.raises(ManifestError):
        fold_split(bare, 0)


def test_single_variant_matrix_equals_run_cv(small_store):
    cfg = TINY.updated(enable_pro=False, enable_den=False)
    rep = run_cv(small_store, cfg, [0, 1])
    res = run_matrix(small_store, ExperimentMatrix("one", cfg, [("only", {})]), [0], [0, 1])
    assert len(res.rows) == 1 and res.rows[0].status == "ok"
    assert res.rows[0].mean == rep.mean and res.rows[0].std == rep.std


def test_same_seed_same_report(small_dir):
    a = run_cv(ImageStore(small_dir), TINY, [0])
    b = run_cv(ImageStore(small_dir), TINY, [0])
    assert a.to_dict(roc=True)["folds"] == b.to_dict(roc=True)["folds"]


def test_teacher_cache_reuses_per_fold_and_seed(small_store):
    cache = TeacherCache()
    run_cv(small_store, TINY, [0], cache)
    run_cv(small_store, TINY.updated(enable_den=False), [0], cache)
    assert len(cache) == 1
    run_cv(small_store, TINY.updated(seed=1), [0], cache)
    assert len(cache) == 2


def test_held_out_read_during_training_is_caught(small_store, monkeypatch):
    real = trainer.train_distill

    def leaky(store, train, cfg, teacher_state, **kw):
        _, test = fold_split(store.samples, 0)
        store.image(test[0].id)
        return real(store, train, cfg, teacher_state, **kw)

    monkeypatch.setattr(trainer, "train_distill", leaky)
    with pytest.raises(ProtocolViolation):
        run_fold(small_store, TINY.updated(enable_pro=False, enable_den=False), 0)


def test_matrix_rows_flags_and_failures(small_store, tmp_path):
    matrix = ExperimentMatrix("demo", TINY.updated(enable_pro=False, enable_den=False),
                              [("ok", {}), ("bad", dict(batch_size=4))])
    res = run_matrix(small_store, matrix, [0, 1], [0], out_dir=tmp_path)
    status = {(r.variant, r.seed): r.status for r in res.rows}
    assert status == {("ok", 0): "ok", ("ok", 1): "ok", ("bad", 0): "failed", ("bad", 1): "failed"}
    assert "ConfigurationError" in res.rows[1].error
    assert res.trend["failed"] == ["bad"] and res.trend["variants"]["ok"]["seeds"] == 2
    with open(tmp_path / "demo.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["batch_size"] for r in rows] == ["24", "4", "24", "4"]
    assert json.loads((tmp_path / "demo.json").read_text())["matrix"] == "demo"


def test_preset_matrices():
    m = components_matrix(DESK)
    assert [n for n, _, _ in m.configs()] == ["baseline", "pro-only", "den-only", "full"]
    assert m.flag_columns() == ["enable_pro", "enable_den"]
    assert [c.pairing_mode for _, _, c in pairing_matrix(DESK).configs()] == ["group", "image", "mixed"]
    assert len(subcomponent_matrix(DESK).configs()) == 5
    taus = [(c.tau1, c.tau2) for _, _, c in tau_sweep(DESK).configs()]
    assert len(taus) == 9 and all(t1 < t2 for t1, t2 in taus)


def test_unnamed_change_is_rejected():
    with pytest.raises(ValueError, match="tau2"):
        ExperimentMatrix("x", DESK, [("v", dict(tau1=0.75))]).configs()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_threshold_grid_counts_are_monotone(seed):
    cams = np.random.default_rng(seed).random((4, 5, 5))
    grid = {(r["tau1"], r["tau2"]): r for r in threshold_grid(cams)}
    for (t1, t2), r in grid.items():
        assert r["fg"] + r["bg"] + r["amb"] == cams.size
        for (u1, u2), q in grid.items():
            if u1 >= t1 and u2 == t2:
                assert q["bg"] >= r["bg"] and q["fg"] == r["fg"]
            if u2 >= t2 and u1 == t1:
                assert q["fg"] <= r["fg"] and q["bg"] == r["bg"]


@pytest.mark.parametrize("stages", [(8,), (8, 16), (8, 16, 32)])
def test_param_counts_match_formulas(stages):
    cfg = DESK.updated(stages=stages)
    d = stages[-1]
    got = param_counts(cfg)
    assert got["qformer"] == qformer_param_count(d, cfg.num_queries, cfg.qformer_blocks)
    assert got["srca"] == srca_param_count(d)
