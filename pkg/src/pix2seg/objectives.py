"""Adversarial, L1 and pixel cross-entropy losses plus the Adam update."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.tensor import GradientMap, ShapeError, Tensor
from .networks import ParameterSet

DEFAULT_LAMBDA = 100.0


@dataclass
class LossBreakdown:
    d_loss_real: float
    d_loss_fake: float
    d_loss_total: float
    g_adv: float
    g_l1: float
    g_total: float
    lam: float

    def check(self) -> None:
        vals = (self.d_loss_real, self.d_loss_fake, self.d_loss_total, self.g_adv, self.g_l1, self.g_total)
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"loss components must be finite and non-negative: {vals}")


def bce_from_logits(logits: Tensor, target: int) -> Tensor:
    """Mean sigmoid cross-entropy against a constant 0/1 target.

    target 1 gives mean(softplus(-l)) = -mean log sigmoid(l); target 0 gives
    mean(softplus(l)) = -mean log(1 - sigmoid(l)).
    """
    if target == 1:
        return ops.reduce_mean(ops.softplus(ops.neg(logits)))
    if target == 0:
        return ops.reduce_mean(ops.softplus(logits))
    raise ValueError(f"target must be 0 or 1, got {target}")


def discriminator_loss(logits_real: Tensor, logits_fake: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    if logits_real.dims != logits_fake.dims:
        raise ShapeError(f"logit maps differ: {logits_real.dims} vs {logits_fake.dims}")
    real = bce_from_logits(logits_real, 1)
    fake = bce_from_logits(logits_fake, 0)
    return real, fake, ops.add(real, fake)


def generator_adversarial_loss(logits_fake: Tensor) -> Tensor:
    # non-saturating generator objective: -log D(x, G(x, z))
    return bce_from_logits(logits_fake, 1)


def l1_loss(y: Tensor, y_hat: Tensor) -> Tensor:
    if y.dims != y_hat.dims:
        raise ShapeError(f"l1_loss dims differ: {y.dims} vs {y_hat.dims}")
    return ops.reduce_mean(ops.abs(ops.sub(y, y_hat)))


def generator_total_loss(g_adv: Tensor, g_l1: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return ops.add(g_adv, ops.scalar_mul(g_l1, lam))


def pixel_bce_loss(probabilities: Tensor, mask: Tensor) -> Tensor:
    """-mean[m log p + (1 - m) log(1 - p)] for p strictly inside (0, 1)."""
    if probabilities.dims != mask.dims:
        raise ShapeError(f"pixel_bce_loss dims differ: {probabilities.dims} vs {mask.dims}")
    one_minus_p = ops.add(ops.neg(probabilities), 1.0)
    one_minus_m = ops.add(ops.neg(mask), 1.0)
    ll = ops.add(ops.mul(ops.log(probabilities), mask), ops.mul(ops.log(one_minus_p), one_minus_m))
    return ops.neg(ops.reduce_mean(ll))


def pixel_bce_from_logits(logits: Tensor, mask: Tensor) -> Tensor:
    """Stable form of :func:`pixel_bce_loss`: mean(softplus(l) - m * l)."""
    if logits.dims != mask.dims:
        raise ShapeError(f"pixel_bce_from_logits dims differ: {logits.dims} vs {mask.dims}")
    return ops.reduce_mean(ops.sub(ops.softplus(logits), ops.mul(mask, logits)))


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    config: AdamConfig
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    step: int = 0

    @classmethod
    def fresh(cls, params: ParameterSet, config: AdamConfig = AdamConfig()) -> "AdamState":
        m = OrderedDict((k, np.zeros_like(t.data)) for k, t in params.params.items())
        v = OrderedDict((k, np.zeros_like(t.data)) for k, t in params.params.items())
        return cls(config, m, v, 0)


def adam_step(params: ParameterSet, grads: GradientMap, state: AdamState) -> tuple[ParameterSet, AdamState]:
    """One bias-corrected Adam update; returns new params and new state.

    ``grads`` is keyed by the exact tensors in ``params``; parameters absent
    from it are treated as having zero gradient.
    """
    cfg = state.config
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    new_params: "OrderedDict[str, Tensor]" = OrderedDict()
    new_m: "OrderedDict[str, np.ndarray]" = OrderedDict()
    new_v: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, p in params.params.items():
        m, v = state.m[name], state.v[name]
        if m.shape != p.dims or v.shape != p.dims:
            raise ShapeError(f"adam state for {name} has dims {m.shape}, parameter has {p.dims}")
        g = grads.get_array(p)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.dims:
            raise ShapeError(f"gradient for {name} has dims {g.shape}, parameter has {p.dims}")
        g = g.astype(p.dtype, copy=False)
        m = (cfg.beta1 * m + (1.0 - cfg.beta1) * g).astype(p.dtype)
        v = (cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)).astype(p.dtype)
        update = cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        new_params[name] = Tensor._wrap((p.data - update).astype(p.dtype), False)
        new_m[name] = m
        new_v[name] = v
    return params.replace(new_params), AdamState(cfg, new_m, new_v, t)
