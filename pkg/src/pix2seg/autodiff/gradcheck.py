"""Finite-difference verification of the backward pass."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError, Tape, Tensor, backward


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    Inputs are promoted to float64 copies before either route runs. For
    element ``x_i`` the difference step is ``step * max(1, |x_i|)`` and the
    per-element error is ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    ``fn`` must be deterministic across calls (no live dropout noise).
    """
    base = [np.array(t.data, dtype=np.float64) for t in inputs]
    tracked = [Tensor._wrap(b.copy(), True) for b in base]
    with Tape() as tape:
        out = fn(*tracked)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got dims {out.dims}")
    grads = backward(out, tape)
    analytic = [grads[t].data for t in tracked]

    def evaluate(arrays) -> float:
        return float(fn(*[Tensor._wrap(a, False) for a in arrays]).data.reshape(-1)[0])

    worst = 0.0
    for idx, b in enumerate(base):
        flat = b.reshape(-1)
        g_ad = analytic[idx].reshape(-1)
        for i in range(flat.size):
            h = step * max(1.0, abs(flat[i]))
            plus = [a if j != idx else None for j, a in enumerate(base)]
            xp = flat.copy()
            xp[i] += h
            plus[idx] = xp.reshape(b.shape)
            xm = flat.copy()
            xm[i] -= h
            minus = list(plus)
            minus[idx] = xm.reshape(b.shape)
            g_fd = (evaluate(plus) - evaluate(minus)) / (2 * h)
            err = abs(g_ad[i] - g_fd) / max(1e-8, abs(g_ad[i]) + abs(g_fd))
            worst = max(worst, err)
    return worst
