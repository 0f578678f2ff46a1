"""Generator, patch discriminator and baseline U-Net.

All three are plain functions over a :class:`ParameterSet`. The generator
is an encoder/decoder with skip connections: ``depth`` stride-2 conv
blocks down, ``depth`` transposed-conv blocks up, tanh head. The baseline
reuses the same topology with a sigmoid head and no dropout.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .autodiff import ops
from .autodiff.ops import RunningStats
from .autodiff.tensor import Rng, ShapeError, Tensor

INIT_STD = 0.02
KERNEL = 4


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 1
    out_channels: int = 1
    base_width: int = 64
    depth: int = 8
    dropout_p: float = 0.5
    image_size: int = 256

    def validate(self) -> None:
        if self.depth < 2:
            raise SpecError(f"depth must be >= 2, got {self.depth}")
        if self.base_width < 4:
            raise SpecError(f"base_width must be >= 4, got {self.base_width}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise SpecError("channel counts must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise SpecError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.image_size < 2 ** self.depth or self.image_size % (2 ** self.depth):
            raise SpecError(f"image_size {self.image_size} not divisible by 2**depth = {2 ** self.depth}")

    def encoder_channels(self) -> list[int]:
        return [self.base_width * 2 ** min(level, 3) for level in range(self.depth)]

    def decoder_plan(self) -> list[tuple[int, int]]:
        """(input channels, output channels) for each decoder block, innermost first.

        Block 0 consumes the bottleneck alone; block i > 0 consumes the
        previous decoder output concatenated with encoder level depth - i.
        """
        enc = self.encoder_channels()
        plan = []
        prev = enc[-1]
        for i in range(self.depth):
            skip = 0 if i == 0 else enc[self.depth - 1 - i]
            out = self.out_channels if i == self.depth - 1 else enc[self.depth - 2 - i]
            plan.append((prev + skip, out))
            prev = out
        return plan


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 2
    base_width: int = 64
    n_layers: int = 3

    def validate(self) -> None:
        if self.n_layers < 1:
            raise SpecError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.base_width < 1 or self.in_channels < 1:
            raise SpecError("channel counts must be positive")

    def channels(self) -> list[int]:
        return [self.base_width * 2 ** min(level, 3) for level in range(self.n_layers)]

    def output_extent(self, size: int) -> int:
        for _ in range(self.n_layers):
            size = ops.conv_output_extent(size, KERNEL, 2, 1)
        return ops.conv_output_extent(size, KERNEL, 1, 1)


class ParameterSet:
    """Ordered named trainable tensors plus non-trainable normalization buffers."""

    def __init__(self, params: Optional["OrderedDict[str, Tensor]"] = None,
                 buffers: Optional["OrderedDict[str, RunningStats]"] = None):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict(params or {})
        self.buffers: "OrderedDict[str, RunningStats]" = OrderedDict(buffers or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def count(self) -> int:
        return sum(t.size for t in self.params.values())

    def with_grad(self) -> "ParameterSet":
        """Same values and buffers, every tensor tracking gradients."""
        return ParameterSet(OrderedDict((k, v.with_grad()) for k, v in self.params.items()), self.buffers)

    def replace(self, params: "OrderedDict[str, Tensor]") -> "ParameterSet":
        if list(params) != list(self.params):
            raise KeyError("replacement must keep parameter names and order")
        return ParameterSet(params, self.buffers)

    def layers(self) -> list[str]:
        seen: list[str] = []
        for name in self.params:
            layer = name.rsplit(".", 1)[0]
            if layer not in seen:
                seen.append(layer)
        return seen


def _add_conv(ps: ParameterSet, name: str, shape: tuple[int, ...], rng: Rng, bias_channels: int = 0) -> None:
    ps.params[f"{name}.weight"] = Tensor.gaussian(shape, 0.0, INIT_STD, rng)
    if bias_channels:
        ps.params[f"{name}.bias"] = Tensor.zeros((bias_channels,))


def _add_norm(ps: ParameterSet, name: str, channels: int, rng: Rng) -> None:
    ps.params[f"{name}.gain"] = Tensor.gaussian((channels,), 1.0, INIT_STD, rng)
    ps.params[f"{name}.shift"] = Tensor.zeros((channels,))
    ps.buffers[name] = RunningStats(channels)


def _build_encoder_decoder(spec: GeneratorSpec, rng: Rng) -> ParameterSet:
    spec.validate()
    ps = ParameterSet()
    enc = spec.encoder_channels()
    prev = spec.in_channels
    for level, ch in enumerate(enc):
        # a conv feeding a norm gets no bias: the norm's shift subsumes it
        _add_conv(ps, f"enc{level}.conv", (ch, prev, KERNEL, KERNEL), rng, ch if level == 0 else 0)
        if level > 0:
            _add_norm(ps, f"enc{level}.norm", ch, rng)
        prev = ch
    plan = spec.decoder_plan()
    for i, (cin, cout) in enumerate(plan):
        last = i == spec.depth - 1
        _add_conv(ps, f"dec{i}.conv", (cin, cout, KERNEL, KERNEL), rng, cout if last else 0)
        if not last:
            _add_norm(ps, f"dec{i}.norm", cout, rng)
    return ps


def build_generator(spec: GeneratorSpec, rng: Rng) -> ParameterSet:
    return _build_encoder_decoder(spec, rng)


def build_baseline_unet(spec: GeneratorSpec, rng: Rng) -> ParameterSet:
    return _build_encoder_decoder(spec, rng)


def _norm(ps: ParameterSet, name: str, x: Tensor, norm_mode: str) -> Tensor:
    stats = ps.buffers.get(name)
    if norm_mode == "batch":
        # normalize with the current batch, leave running statistics untouched
        return ops.channel_norm(x, ps[f"{name}.gain"], ps[f"{name}.shift"], "train", None)
    return ops.channel_norm(x, ps[f"{name}.gain"], ps[f"{name}.shift"], norm_mode, stats)


def _check_input(spec: GeneratorSpec, x: Tensor) -> None:
    expected = (spec.in_channels, spec.image_size, spec.image_size)
    if x.data.ndim != 4 or x.dims[1:] != expected:
        raise ShapeError(f"expected input dims [N, {expected[0]}, {expected[1]}, {expected[2]}], got {list(x.dims)}")


def _encoder_decoder_logits(spec: GeneratorSpec, ps: ParameterSet, x: Tensor, noise_p: float,
                            noise_active: bool, rng: Optional[Rng], norm_mode: str) -> Tensor:
    _check_input(spec, x)
    skips = []
    h = x
    for level in range(spec.depth):
        bias = ps.params.get(f"enc{level}.conv.bias")
        h = ops.conv2d(h, ps[f"enc{level}.conv.weight"], bias, stride=2, padding=1)
        if level > 0:
            h = _norm(ps, f"enc{level}.norm", h, norm_mode)
        h = ops.leaky_relu(h)
        skips.append(h)
    h = skips[-1]
    for i in range(spec.depth):
        if i > 0:
            h = ops.concat_channels(h, skips[spec.depth - 1 - i])
        last = i == spec.depth - 1
        bias = ps.params.get(f"dec{i}.conv.bias")
        h = ops.conv_transpose2d(h, ps[f"dec{i}.conv.weight"], bias, stride=2, padding=1)
        if last:
            break
        h = _norm(ps, f"dec{i}.norm", h, norm_mode)
        if i < 3:
            h = ops.dropout(h, noise_p, rng, active=noise_active)
        h = ops.relu(h)
    return h


def generator_forward(spec: GeneratorSpec, params: ParameterSet, x: Tensor, noise_active: bool = True,
                      rng: Optional[Rng] = None, norm_mode: str = "train") -> Tensor:
    """Translate ``x`` (N, 1, S, S) into a tanh-range mask image of the same dims.

    Dropout in the innermost decoder blocks is the noise source; pass
    ``noise_active=False`` for deterministic inference. ``norm_mode`` is
    ``train`` (batch stats, updates running stats), ``batch`` (batch stats
    only) or ``eval`` (running stats).
    """
    h = _encoder_decoder_logits(spec, params, x, spec.dropout_p, noise_active, rng, norm_mode)
    return ops.tanh(h)


def baseline_logits(spec: GeneratorSpec, params: ParameterSet, x: Tensor, norm_mode: str = "train") -> Tensor:
    return _encoder_decoder_logits(spec, params, x, 0.0, False, None, norm_mode)


def baseline_forward(spec: GeneratorSpec, params: ParameterSet, x: Tensor, norm_mode: str = "train") -> Tensor:
    """Foreground probability map in (0, 1)."""
    return ops.sigmoid(baseline_logits(spec, params, x, norm_mode))


def build_discriminator(spec: DiscriminatorSpec, rng: Rng) -> ParameterSet:
    spec.validate()
    ps = ParameterSet()
    prev = spec.in_channels
    for level, ch in enumerate(spec.channels()):
        _add_conv(ps, f"disc{level}.conv", (ch, prev, KERNEL, KERNEL), rng, ch if level == 0 else 0)
        if level > 0:
            _add_norm(ps, f"disc{level}.norm", ch, rng)
        prev = ch
    _add_conv(ps, "head.conv", (1, prev, KERNEL, KERNEL), rng, 1)
    return ps


def discriminator_forward(spec: DiscriminatorSpec, params: ParameterSet, x: Tensor, y: Tensor,
                          norm_mode: str = "train") -> Tensor:
    """Patch logit map scoring the pair (x, y); no sigmoid applied."""
    if x.data.ndim != 4 or y.data.ndim != 4 or x.dims[0] != y.dims[0] or x.dims[2:] != y.dims[2:]:
        raise ShapeError(f"discriminator inputs disagree: {x.dims} vs {y.dims}")
    h = ops.concat_channels(x, y)
    if h.dims[1] != spec.in_channels:
        raise ShapeError(f"discriminator expects {spec.in_channels} channels, got {h.dims[1]}")
    for level in range(spec.n_layers):
        bias = params.params.get(f"disc{level}.conv.bias")
        h = ops.conv2d(h, params[f"disc{level}.conv.weight"], bias, stride=2, padding=1)
        if level > 0:
            h = _norm(params, f"disc{level}.norm", h, norm_mode)
        h = ops.leaky_relu(h)
    return ops.conv2d(h, params["head.conv.weight"], params["head.conv.bias"], stride=1, padding=1)


def all_finite(ps: ParameterSet) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in ps.params.values())
