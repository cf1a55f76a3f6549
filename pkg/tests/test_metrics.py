import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pagkd.metrics import binary_auc, compute_metrics, roc_points


def pairwise_auc(scores, positive):
    """O(n^2): fraction of (pos, neg) pairs ranked correctly, ties count one half."""
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def random_probs(rng, n, k, ties=False):
    logits = rng.normal(size=(n, k))
    if ties:
        logits = np.round(logits, 1)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def test_perfect_predictions():
    labels = np.array([0, 1, 2, 2, 1, 0])
    rep = compute_metrics(np.eye(3)[labels], labels)
    assert (rep.accuracy, rep.precision, rep.recall, rep.f1, rep.auc) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_binary_example():
    assert binary_auc(np.array([0.9, 0.8, 0.3, 0.1]), np.array([1, 1, 0, 0])) == 1.0
    probs = np.array([[0.1, 0.9], [0.2, 0.8], [0.7, 0.3], [0.9, 0.1]])
    rep = compute_metrics(probs, np.array([1, 1, 0, 0]))
    assert rep.auc == 1.0 and list(rep.per_class_auc) == [1]


@pytest.mark.parametrize("seed", range(50))
def test_macro_auc_matches_pairwise_oracle(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, 200)
    probs = random_probs(rng, 200, 3, ties=seed % 2 == 0)
    rep = compute_metrics(probs, labels)
    per = [pairwise_auc(probs[:, c], labels == c) for c in range(3)]
    for c in range(3):
        assert abs(rep.per_class_auc[c] - per[c]) < 1e-10
    assert abs(rep.auc - np.mean(per)) < 1e-10


def test_absent_class_warns_and_is_dropped():
    labels = np.array([0, 0, 1, 1])
    probs = random_probs(np.random.default_rng(0), 4, 3)
    with pytest.warns(UserWarning, match="absent"):
        rep = compute_metrics(probs, labels)
    assert set(rep.per_class_auc) == {0, 1}


def test_rows_must_sum_to_one():
    with pytest.raises(ValueError):
        compute_metrics(np.ones((2, 3)), np.array([0, 1]))


def test_roc_is_exact_staircase():
    pts = roc_points(np.array([0.9, 0.5, 0.5, 0.1]), np.array([1, 0, 1, 0]))
    np.testing.assert_allclose(pts, [[0, 0], [0, 0.5], [0.5, 1.0], [1.0, 1.0]])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5))
def test_metrics_pure_and_bounded(seed, k):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k, 30)
    probs = random_probs(rng, 30, k)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a, b = compute_metrics(probs, labels), compute_metrics(probs, labels)
    assert a == b
    for v in (a.accuracy, a.precision, a.recall, a.f1, a.auc):
        assert 0.0 <= v <= 1.0
    if a.per_class_auc:
        assert abs(a.auc - np.mean(list(a.per_class_auc.values()))) < 1e-12
