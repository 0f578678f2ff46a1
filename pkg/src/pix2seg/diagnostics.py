"""Finite-difference gradient suite over every differentiable op and the full loss graphs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import networks as nets
from .autodiff import ops
from .autodiff.gradcheck import grad_check
from .autodiff.tensor import Rng, Tensor
from .objectives import (
    bce_from_logits,
    discriminator_loss,
    generator_adversarial_loss,
    generator_total_loss,
    l1_loss,
    pixel_bce_from_logits,
    pixel_bce_loss,
)

OP_TOLERANCE = 1e-4
GRAPH_TOLERANCE = 1e-3


@dataclass(frozen=True)
class GradResult:
    name: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.error <= self.tolerance


def _u(rng: Rng, dims, lo=-2.0, hi=2.0) -> Tensor:
    return Tensor._wrap(rng.uniform(dims, lo, hi), False)


def _weighted(out: Tensor, w: Tensor) -> Tensor:
    # random projection so no gradient cancels by symmetry
    return ops.reduce_mean(ops.mul(out, w))


def op_cases(rng: Rng) -> list[tuple[str, Callable, list[Tensor]]]:
    v = (2, 3, 4, 4)
    w = _u(rng, v)
    a, b = _u(rng, v), _u(rng, v)
    pos = _u(rng, v, 0.5, 2.0)
    x4 = _u(rng, (2, 2, 6, 6))
    k3 = _u(rng, (3, 2, 3, 3), -0.5, 0.5)
    k4 = _u(rng, (3, 2, 4, 4), -0.5, 0.5)
    kt = _u(rng, (2, 3, 4, 4), -0.5, 0.5)
    bias = _u(rng, (3,))
    w_conv3 = _u(rng, (2, 3, 6, 6))
    w_conv4 = _u(rng, (2, 3, 3, 3))
    w_convt = _u(rng, (2, 3, 12, 12))
    gain, shift = _u(rng, (2,), 0.5, 1.5), _u(rng, (2,))
    w_norm = _u(rng, (2, 2, 6, 6))
    stats = ops.RunningStats(2)
    stats.mean = np.array([0.3, -0.2], dtype=np.float32)
    stats.var = np.array([1.5, 0.7], dtype=np.float32)
    c1, c2 = _u(rng, (2, 1, 4, 4)), _u(rng, (2, 2, 4, 4))
    w_cat = _u(rng, (2, 3, 4, 4))
    w_slice = _u(rng, (2, 1, 4, 4))
    y01 = Tensor._wrap((rng.uniform(v) > 0.5).astype(np.float64), False)
    probs = _u(rng, v, 0.05, 0.95)

    def drop(x):
        return _weighted(ops.dropout(x, 0.5, Rng(11), active=True), w)

    return [
        ("add", lambda x, y: _weighted(ops.add(x, y), w), [a, b]),
        ("sub", lambda x, y: _weighted(ops.sub(x, y), w), [a, b]),
        ("mul", lambda x, y: _weighted(ops.mul(x, y), w), [a, b]),
        ("scalar_mul", lambda x: _weighted(ops.scalar_mul(x, -1.7), w), [a]),
        ("neg", lambda x: _weighted(ops.neg(x), w), [a]),
        ("abs", lambda x: _weighted(ops.abs(x), w), [a]),
        ("log", lambda x: _weighted(ops.log(x), w), [pos]),
        ("softplus", lambda x: _weighted(ops.softplus(x), w), [a]),
        ("relu", lambda x: _weighted(ops.relu(x), w), [a]),
        ("leaky_relu", lambda x: _weighted(ops.leaky_relu(x), w), [a]),
        ("tanh", lambda x: _weighted(ops.tanh(x), w), [a]),
        ("sigmoid", lambda x: _weighted(ops.sigmoid(x), w), [a]),
        ("reduce_mean", lambda x: ops.reduce_mean(x), [a]),
        ("dropout", drop, [a]),
        ("concat_channels", lambda x, y: _weighted(ops.concat_channels(x, y), w_cat), [c1, c2]),
        ("slice_channels", lambda x: _weighted(ops.slice_channels(x, 1, 2), w_slice), [c2]),
        ("conv2d k3 s1 p1", lambda x, k, bb: _weighted(ops.conv2d(x, k, bb, 1, 1), w_conv3), [x4, k3, bias]),
        ("conv2d k4 s2 p1", lambda x, k: _weighted(ops.conv2d(x, k, None, 2, 1), w_conv4), [x4, k4]),
        ("conv_transpose2d k4 s2 p1", lambda x, k, bb: _weighted(ops.conv_transpose2d(x, k, bb, 2, 1), w_convt),
         [x4, kt, bias]),
        ("channel_norm train", lambda x, g, s: _weighted(ops.channel_norm(x, g, s, "train"), w_norm),
         [x4, gain, shift]),
        ("channel_norm eval", lambda x, g, s: _weighted(ops.channel_norm(x, g, s, "eval", stats), w_norm),
         [x4, gain, shift]),
        ("conv2d>leaky_relu>mean", lambda x, k: ops.reduce_mean(ops.leaky_relu(ops.conv2d(x, k, None, 1, 1))),
         [_u(rng, (1, 2, 6, 6)), k3]),
        ("bce_from_logits", lambda x: ops.add(bce_from_logits(x, 1), bce_from_logits(x, 0)), [a]),
        ("l1_loss", lambda x, y: l1_loss(x, y), [a, b]),
        ("pixel_bce_from_logits", lambda x: pixel_bce_from_logits(x, y01), [a]),
        ("pixel_bce_loss", lambda p: pixel_bce_loss(p, y01), [probs]),
    ]


def small_specs() -> tuple[nets.GeneratorSpec, nets.DiscriminatorSpec]:
    return (nets.GeneratorSpec(base_width=4, depth=2, dropout_p=0.5, image_size=8),
            nets.DiscriminatorSpec(base_width=4, n_layers=2))


def graph_cases(rng: Rng, lam: float = 100.0) -> list[tuple[str, Callable, list[Tensor]]]:
    gspec, dspec = small_specs()
    g = nets.build_generator(gspec, rng.fork(1))
    d = nets.build_discriminator(dspec, rng.fork(2))
    u = nets.build_baseline_unet(gspec, rng.fork(3))
    x = _u(rng, (1, 1, 8, 8), -1.0, 1.0)
    y = Tensor._wrap(np.where(rng.uniform((1, 1, 8, 8)) > 0.5, 1.0, -1.0), False)
    g_names, d_names, u_names = g.names(), d.names(), u.names()

    def rebuild(ps, names, tensors):
        return ps.replace(dict(zip(names, tensors)))

    def generator_graph(*tensors):
        gp = rebuild(g, g_names, tensors)
        fake = nets.generator_forward(gspec, gp, x, noise_active=True, rng=Rng(5), norm_mode="batch")
        logits = nets.discriminator_forward(dspec, d, x, fake, norm_mode="batch")
        return generator_total_loss(generator_adversarial_loss(logits), l1_loss(y, fake), lam)

    fixed_fake = nets.generator_forward(gspec, g, x, noise_active=False, norm_mode="batch").detach()

    def discriminator_graph(*tensors):
        dp = rebuild(d, d_names, tensors)
        real = nets.discriminator_forward(dspec, dp, x, y, norm_mode="batch")
        fake = nets.discriminator_forward(dspec, dp, x, fixed_fake, norm_mode="batch")
        return discriminator_loss(real, fake)[2]

    mask01 = Tensor._wrap((y.data > 0).astype(np.float64), False)

    def baseline_graph(*tensors):
        up = rebuild(u, u_names, tensors)
        return pixel_bce_from_logits(nets.baseline_logits(gspec, up, x, norm_mode="batch"), mask01)

    return [
        ("generator loss graph 8x8", generator_graph, list(g.params.values())),
        ("discriminator loss graph 8x8", discriminator_graph, list(d.params.values())),
        ("baseline loss graph 8x8", baseline_graph, list(u.params.values())),
    ]


def gradient_suite(seed: int = 0) -> list[GradResult]:
    rng = Rng(seed)
    results = [GradResult(name, grad_check(fn, inputs), OP_TOLERANCE)
               for name, fn, inputs in op_cases(rng.fork(0))]
    results += [GradResult(name, grad_check(fn, inputs), GRAPH_TOLERANCE)
                for name, fn, inputs in graph_cases(rng.fork(1))]
    return results


def format_results(results: list[GradResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  {r.error:.3e}  (tol {r.tolerance:.0e})  {'PASS' if r.ok else 'FAIL'}"
             for r in results]
    return "\n".join(lines) + "\n"
