"""Alternating adversarial training, baseline training and checkpoint evaluation."""

from __future__ import annotations

import io
import logging
import math
import os
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import networks as nets
from .autodiff.tensor import Rng, Tape, Tensor, backward
from .checkpoint import Checkpoint
from .data import SamplePair, batches, load_pair, ManifestEntry, save_image
from .evaluation import MetricRecord, SummaryRow, binarize, metric_record, summarize_all
from .networks import DiscriminatorSpec, GeneratorSpec, ParameterSet
from .objectives import (
    DEFAULT_LAMBDA,
    AdamConfig,
    AdamState,
    adam_step,
    discriminator_loss,
    generator_adversarial_loss,
    generator_total_loss,
    l1_loss,
    pixel_bce_from_logits,
)

logger = logging.getLogger(__name__)

MODELS = ("pix2pix", "unet")

# independent rng streams derived from the run seed
_STREAM_G_INIT, _STREAM_D_INIT, _STREAM_SHUFFLE, _STREAM_NOISE, _STREAM_EVAL_NOISE = range(5)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    model: str = "pix2pix"
    epochs: int = 100
    batch_size: int = 1
    lam: float = DEFAULT_LAMBDA
    generator: GeneratorSpec = GeneratorSpec()
    discriminator: DiscriminatorSpec = DiscriminatorSpec()
    optimizer: AdamConfig = AdamConfig()
    seed: int = 0
    shuffle: bool = True
    max_steps: Optional[int] = None  # optional cap on optimizer steps

    @property
    def image_size(self) -> int:
        return self.generator.image_size

    def validate(self) -> None:
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        self.generator.validate()
        if self.model == "pix2pix":
            self.discriminator.validate()
            if self.discriminator.output_extent(self.image_size) < 1:
                raise ValueError("discriminator too deep for the image size")


@dataclass
class TrainLog:
    model: str
    rows: list[tuple] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)

    @property
    def header(self) -> tuple[str, ...]:
        if self.model == "pix2pix":
            return ("step", "d_loss", "g_adv", "g_l1", "g_total")
        return ("step", "bce")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.header) + "\n")
        for row in self.rows:
            buf.write(",".join([str(row[0])] + [repr(float(v)) for v in row[1:]]) + "\n")
        return buf.getvalue()

    @property
    def train_seconds(self) -> float:
        return float(sum(self.epoch_seconds))


def _check_finite(step: int, **values: float) -> None:
    for name, v in values.items():
        if not math.isfinite(v):
            raise TrainingDiverged(step, name)


def _epoch_order(n: int, epoch: int, shuffle: bool, rng: Rng) -> list[int]:
    if not shuffle:
        return list(range(n))
    return [int(i) for i in rng.fork(epoch).permutation(n)]


def _mask01(y: Tensor) -> Tensor:
    return Tensor._wrap((y.data > 0).astype(y.dtype), False)


def discriminator_update(dspec: DiscriminatorSpec, d_params: ParameterSet, d_state: AdamState,
                         x: Tensor, y: Tensor, fake: Tensor):
    """One Adam step on D with (x, y) as real and the detached ``fake``.

    Returns new params, new state, the total D loss and the gradient map
    (which never holds generator tensors).
    """
    d_live = d_params.with_grad()
    with Tape() as d_tape:
        logits_real = nets.discriminator_forward(dspec, d_live, x, y)
        logits_fake = nets.discriminator_forward(dspec, d_live, x, fake.detach())
        _, _, d_total = discriminator_loss(logits_real, logits_fake)
    grads = backward(d_total, d_tape)
    new_params, new_state = adam_step(d_live, grads, d_state)
    return new_params, new_state, d_total, grads


def generator_update(dspec: DiscriminatorSpec, d_params: ParameterSet, g_live: ParameterSet,
                     g_state: AdamState, g_tape: Tape, x: Tensor, y: Tensor, fake: Tensor, lam: float):
    """One Adam step on G; ``fake`` must come from ``g_live`` on ``g_tape``."""
    with g_tape:
        logits = nets.discriminator_forward(dspec, d_params, x, fake)
        g_adv = generator_adversarial_loss(logits)
        g_l1 = l1_loss(y, fake)
        g_total = generator_total_loss(g_adv, g_l1, lam)
    grads = backward(g_total, g_tape)
    new_params, new_state = adam_step(g_live, grads, g_state)
    return new_params, new_state, (g_adv, g_l1, g_total)


def train_pix2pix(config: TrainConfig, train_set: Sequence[SamplePair],
                  on_step: Optional[Callable[[int, tuple], None]] = None) -> tuple[Checkpoint, TrainLog]:
    """One D step then one G step per batch.

    D sees (x, y) as real and (x, detached G(x, z)) as fake; G then
    minimizes the non-saturating adversarial loss plus lambda times L1
    against the freshly updated D.
    """
    config.validate()
    if config.model != "pix2pix":
        raise ValueError("train_pix2pix needs model='pix2pix'")
    if not train_set:
        raise ValueError("empty training set")
    root = Rng(config.seed)
    gspec, dspec = config.generator, config.discriminator
    g_params = nets.build_generator(gspec, root.fork(_STREAM_G_INIT))
    d_params = nets.build_discriminator(dspec, root.fork(_STREAM_D_INIT))
    g_state = AdamState.fresh(g_params, config.optimizer)
    d_state = AdamState.fresh(d_params, config.optimizer)
    shuffle_rng = root.fork(_STREAM_SHUFFLE)
    noise_rng = root.fork(_STREAM_NOISE)
    log = TrainLog("pix2pix")
    step = 0
    done = False
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = _epoch_order(len(train_set), epoch, config.shuffle, shuffle_rng)
        for _, x, y in batches(train_set, config.batch_size, order):
            g_live = g_params.with_grad()
            with Tape() as g_tape:
                fake = nets.generator_forward(gspec, g_live, x, noise_active=True, rng=noise_rng)
            d_params, d_state, d_total, _ = discriminator_update(dspec, d_params, d_state, x, y, fake)
            g_params, g_state, (g_adv, g_l1, g_total) = generator_update(
                dspec, d_params, g_live, g_state, g_tape, x, y, fake, config.lam)

            row = (step, d_total.item(), g_adv.item(), g_l1.item(), g_total.item())
            _check_finite(step, d_loss=row[1], g_adv=row[2], g_l1=row[3], g_total=row[4])
            log.rows.append(row)
            if on_step is not None:
                on_step(step, row)
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        log.epoch_seconds.append(time.perf_counter() - t0)
        logger.info("epoch %d: step %d d_loss %.4f g_total %.4f", epoch, step, log.rows[-1][1], log.rows[-1][4])
        if done:
            break
    ckpt = Checkpoint("pix2pix", gspec, dspec, step,
                      OrderedDict([("G", _frozen(g_params)), ("D", _frozen(d_params))]),
                      {"G": g_state, "D": d_state})
    return ckpt, log


def train_baseline(config: TrainConfig, train_set: Sequence[SamplePair],
                   on_step: Optional[Callable[[int, tuple], None]] = None) -> tuple[Checkpoint, TrainLog]:
    """Pixelwise cross-entropy training of the U-Net baseline, one Adam step per batch."""
    config.validate()
    if config.model != "unet":
        raise ValueError("train_baseline needs model='unet'")
    if not train_set:
        raise ValueError("empty training set")
    root = Rng(config.seed)
    spec = config.generator
    params = nets.build_baseline_unet(spec, root.fork(_STREAM_G_INIT))
    state = AdamState.fresh(params, config.optimizer)
    shuffle_rng = root.fork(_STREAM_SHUFFLE)
    log = TrainLog("unet")
    step = 0
    done = False
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = _epoch_order(len(train_set), epoch, config.shuffle, shuffle_rng)
        for _, x, y in batches(train_set, config.batch_size, order):
            live = params.with_grad()
            with Tape() as tape:
                logits = nets.baseline_logits(spec, live, x)
                loss = pixel_bce_from_logits(logits, _mask01(y))
            grads = backward(loss, tape)
            params, state = adam_step(live, grads, state)
            row = (step, loss.item())
            _check_finite(step, bce=row[1])
            log.rows.append(row)
            if on_step is not None:
                on_step(step, row)
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        log.epoch_seconds.append(time.perf_counter() - t0)
        logger.info("epoch %d: step %d bce %.4f", epoch, step, log.rows[-1][1])
        if done:
            break
    ckpt = Checkpoint("unet", spec, None, step, OrderedDict([("U", _frozen(params))]), {"U": state})
    return ckpt, log


def train(config: TrainConfig, train_set: Sequence[SamplePair], **kw) -> tuple[Checkpoint, TrainLog]:
    if config.model == "pix2pix":
        return train_pix2pix(config, train_set, **kw)
    return train_baseline(config, train_set, **kw)


def _frozen(ps: ParameterSet) -> ParameterSet:
    return ps.replace(OrderedDict((k, v.detach()) for k, v in ps.params.items()))


# inference and evaluation -------------------------------------------------


def predict(ckpt: Checkpoint, x: Tensor, noise: bool = False, rng: Optional[Rng] = None,
            norm_mode: str = "batch") -> tuple[np.ndarray, float]:
    """Raw prediction for ``x`` and the threshold that binarizes it.

    pix2pix outputs are tanh-range (threshold 0); the baseline outputs
    probabilities (threshold 0.5).
    """
    spec = ckpt.generator_spec
    if ckpt.kind == "pix2pix":
        if noise and rng is None:
            rng = Rng(0).fork(_STREAM_EVAL_NOISE)
        out = nets.generator_forward(spec, ckpt.nets["G"], x, noise_active=noise, rng=rng, norm_mode=norm_mode)
        return out.data, 0.0
    out = nets.baseline_forward(spec, ckpt.nets["U"], x, norm_mode=norm_mode)
    return out.data, 0.5


@dataclass
class EvaluationResult:
    records: list[MetricRecord]
    summary: list[SummaryRow]
    seconds: float
    predictions: list[np.ndarray] = field(default_factory=list, repr=False)


def evaluate_predictions(pairs: Sequence[SamplePair], predictions: Sequence[np.ndarray],
                         threshold: float) -> list[MetricRecord]:
    return [metric_record(p.id, binarize(pred, threshold).reshape(p.mask01.shape), p.mask01)
            for p, pred in zip(pairs, predictions)]


def evaluate_checkpoint(ckpt: Checkpoint, test_set: Sequence[SamplePair], noise: bool = False,
                        seed: int = 0, norm_mode: str = "batch") -> EvaluationResult:
    """Forward each test pair, binarize, score; also reports wall-clock time."""
    if not test_set:
        raise ValueError("empty test set")
    size = ckpt.generator_spec.image_size
    for p in test_set:
        if p.input.dims[-2:] != (size, size):
            raise ValueError(f"{p.id}: image is {p.input.dims[-2:]}, checkpoint expects {size}x{size}")
    rng = Rng(seed).fork(_STREAM_EVAL_NOISE) if noise else None
    t0 = time.perf_counter()
    preds, threshold = [], 0.0
    for p in test_set:
        out, threshold = predict(ckpt, p.input, noise=noise, rng=rng, norm_mode=norm_mode)
        preds.append(out)
    records = evaluate_predictions(test_set, preds, threshold)
    seconds = time.perf_counter() - t0
    return EvaluationResult(records, summarize_all(records), seconds, preds)


def infer(ckpt: Checkpoint, image_path: os.PathLike, output_path: os.PathLike, noise: bool = False,
          raw_path: Optional[os.PathLike] = None, seed: int = 0) -> np.ndarray:
    """Segment one image file; writes a 0/255 mask PNG and returns the {0,1} mask."""
    size = ckpt.generator_spec.image_size
    # the image doubles as its own placeholder mask; only the input is used
    entry = ManifestEntry(Path(image_path).stem, Path(image_path), Path(image_path))
    pair = load_pair(entry, size)
    rng = Rng(seed).fork(_STREAM_EVAL_NOISE) if noise else None
    out, threshold = predict(ckpt, pair.input, noise=noise, rng=rng)
    mask = binarize(out, threshold).reshape(size, size)
    save_image(mask, output_path, value_range="unit")
    if raw_path is not None:
        save_image(out, raw_path, value_range="tanh" if ckpt.kind == "pix2pix" else "unit")
    return mask
