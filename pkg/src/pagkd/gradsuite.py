"""Randomised finite-difference suite over every tape op and both distillation losses.

Each case builds fresh random inputs from a seed and returns ``(f, inputs)``
where ``f`` reads the inputs' current data. Random projection weights are
drawn once per case so ``f`` stays deterministic across perturbations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .gkd_den import SRCA, DenseTerm, build_relation, dense_loss
from .gkd_pro import QFormer, contrastive_loss
from .gradcheck import check
from .tensor import Tensor

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _p(rng, *shape, low=None):
    x = rng.normal(size=shape)
    if low is not None:
        # keep away from kinks / poles
        x = np.where(np.abs(x) < low, np.sign(x + 1e-300) * low, x)
    return Tensor(x, requires_grad=True)


def _proj(f, rng, shape):
    r = rng.normal(size=shape)
    return lambda: T.sum(f() * r)


def _binary(op, low=None):
    def case(rng):
        a = _p(rng, 3, 4)
        b = _p(rng, 1, 4, low=low)
        return _proj(lambda: op(a, b), rng, (3, 4)), [a, b]
    return case


def _unary(op, positive=False, low=None):
    def case(rng):
        a = _p(rng, 3, 5, low=low)
        if positive:
            a.data = np.abs(a.data) + 0.5
        return _proj(lambda: op(a), rng, a.shape), [a]
    return case


def _matmul(rng):
    a, b = _p(rng, 3, 4), _p(rng, 4, 5)
    return _proj(lambda: T.matmul(a, b), rng, (3, 5)), [a, b]


def _shape_ops(rng):
    a = _p(rng, 2, 3, 4)
    r1, r2 = rng.normal(size=(4, 3, 2)), rng.normal(size=(6, 4))

    def f():
        x = T.sum(T.permute(a, (2, 1, 0)) * r1)
        y = T.sum(T.reshape(a, (6, 4)) * r2)
        return x + y
    return f, [a]


def _transpose(rng):
    a = _p(rng, 3, 4)
    return _proj(lambda: T.transpose(a), rng, (4, 3)), [a]


def _take(rng):
    a = _p(rng, 5, 3)
    idx = np.array([0, 2, 2, 4])
    return _proj(lambda: T.take(a, idx), rng, (4, 3)), [a]


def _concat(rng):
    a, b = _p(rng, 2, 3), _p(rng, 4, 3)
    return _proj(lambda: T.concat([a, b], axis=0), rng, (6, 3)), [a, b]


def _reductions(rng):
    a = _p(rng, 3, 4)
    r = rng.normal(size=4)
    return (lambda: T.sum(T.sum(a, axis=0) * r) + T.mean(a) * 3.0
            + T.sum(T.logsumexp(a, axis=1))), [a]


def _l2(rng):
    a = _p(rng, 4, 3)
    return _proj(lambda: T.l2_norm(a, axis=1), rng, (4,)), [a]


def _layer_norm(rng):
    a = _p(rng, 2, 3, 4)
    return _proj(lambda: T.layer_norm(a, axes=(1, 2)), rng, (2, 3, 4)), [a]


def _masked_softmax(rng):
    a = _p(rng, 4, 5)
    bias = np.where(rng.random((4, 5)) < 0.4, T.SENTINEL_NEG_INF, rng.normal(size=(4, 5)))
    bias[:, 0] = 0.0
    return _proj(lambda: T.masked_softmax(a, bias), rng, (4, 5)), [a]


def _softmax(rng):
    a = _p(rng, 3, 4)
    return _proj(lambda: T.softmax(a), rng, (3, 4)), [a]


def _cross_entropy(rng):
    a = _p(rng, 5, 3)
    t = rng.integers(0, 3, 5)
    return _proj(lambda: T.cross_entropy(a, t), rng, (5,)), [a]


def _conv(rng):
    x, w, b = _p(rng, 2, 2, 5, 5), _p(rng, 3, 2, 3, 3), _p(rng, 3)
    return _proj(lambda: T.conv2d(x, w, b), rng, (2, 3, 5, 5)), [x, w, b]


def _pools(rng):
    x = _p(rng, 2, 3, 4, 4)
    r1, r2 = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 3))
    return (lambda: T.sum(T.avg_pool2d(x) * r1) + T.sum(T.global_avg_pool(x) * r2)), [x]


OP_CASES: dict[str, Case] = {
    "add": _binary(T.add), "sub": _binary(T.sub), "mul": _binary(T.mul),
    "div": _binary(T.div, low=0.5), "neg": _unary(T.neg), "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True), "relu": _unary(T.relu, low=0.05),
    "matmul": _matmul, "transpose": _transpose, "reshape/permute": _shape_ops,
    "take": _take, "concat": _concat, "sum/mean/logsumexp": _reductions, "l2_norm": _l2,
    "layer_norm": _layer_norm, "masked_softmax": _masked_softmax, "softmax": _softmax,
    "cross_entropy": _cross_entropy, "conv2d": _conv, "avg_pool/global_avg_pool": _pools,
}

# small loss-head configuration: feature dim 8, 6 positions per group, 3 queries
D, L, NQ, H, W = 8, 6, 3, 2, 3


def _loss_pro(rng):
    qf = QFormer(D, NQ, blocks=2, seed=int(rng.integers(1 << 31)))
    feats = {(c, m): _p(rng, L, D) for c in range(2) for m in ("WLI", "NBI")}

    def f():
        return contrastive_loss({k: qf.forward(v, H, W) for k, v in feats.items()})
    return f, list(feats.values()) + qf.parameters()


def _loss_den(norm_mode):
    def case(rng):
        srca = SRCA(D, seed=int(rng.integers(1 << 31)), value_init="random")
        fw = [_p(rng, L, D) for _ in range(2)]
        fn = [_p(rng, L, D) for _ in range(2)]
        rels = [build_relation(rng.integers(-1, 2, L).astype(np.int8), rng.integers(-1, 2, L).astype(np.int8))
                for _ in range(2)]

        def f():
            terms = [DenseTerm(w, n, srca.reconstruct(n, w, r.bias), srca.reconstruct(w, n, r.bias.T))
                     for w, n, r in zip(fw, fn, rels)]
            return dense_loss(terms, norm_mode)
        return f, fw + fn + srca.parameters()
    return case


HEAD_CASES: dict[str, Case] = {
    "L_pro": _loss_pro, "L_den[mean]": _loss_den("mean"), "L_den[paper]": _loss_den("paper"),
}


@dataclass
class SuiteResult:
    worst: dict[str, float]
    seeds: int
    seconds: float

    @property
    def max_error(self) -> float:
        return max(self.worst.values())


def run(seeds: int = 100, max_coords: int = 6, max_inputs: int = 6,
        cases: dict[str, Case] | None = None) -> SuiteResult:
    """Worst relative FD error per case over ``seeds`` random instances.

    Each seed probes at most ``max_inputs`` randomly chosen input tensors and
    ``max_coords`` entries of each, so coverage accumulates across seeds.
    """
    cases = cases or {**OP_CASES, **HEAD_CASES}
    worst = {name: 0.0 for name in cases}
    start = time.perf_counter()
    for seed in range(seeds):
        for k, (name, case) in enumerate(cases.items()):
            rng = np.random.default_rng([seed, k])
            f, inputs = case(rng)
            if len(inputs) > max_inputs:
                inputs = [inputs[i] for i in sorted(rng.choice(len(inputs), max_inputs, replace=False))]
            worst[name] = max(worst[name], check(f, inputs, max_coords=max_coords, rng=rng))
    return SuiteResult(worst, seeds, time.perf_counter() - start)
