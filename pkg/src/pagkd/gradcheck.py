"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5,
                   coords: Sequence[int] | None = None) -> np.ndarray:
    """d f / d x by central differences; ``f`` must read ``x.data`` on every call.

    With ``coords`` (flat indices) only those entries are estimated; the rest stay 0.
    """
    g = np.zeros_like(x.data)
    flat, gflat = x.data.reshape(-1), g.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        old = flat[i]
        flat[i] = old + h
        fp = float(np.sum(f().data))
        flat[i] = old - h
        fm = float(np.sum(f().data))
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def analytic_grads(f: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for x in inputs:
        x.grad = None
    with Tape() as tape:
        out = f()
    tape.backward(out)
    return [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
          max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error over ``inputs`` between tape and finite-difference gradients.

    ``max_coords`` caps how many entries per input are probed (chosen by ``rng``).
    """
    grads = analytic_grads(f, inputs)
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for x, g in zip(inputs, grads):
        coords = None
        if max_coords is not None and x.data.size > max_coords:
            coords = np.sort(rng.choice(x.data.size, max_coords, replace=False))
        num = numerical_grad(f, x, h, coords)
        if coords is not None:
            g, num = g.reshape(-1)[coords], num.reshape(-1)[coords]
        worst = max(worst, relative_error(g, num))
    return worst
