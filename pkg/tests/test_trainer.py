import math

import numpy as np
import pytest
from PIL import Image

from pix2seg.autodiff import Rng, Tape
from pix2seg.checkpoint import load_checkpoint, save_checkpoint, to_bytes
from pix2seg import networks as nets
from pix2seg.data import PhantomConfig, generate_phantoms
from pix2seg.objectives import AdamState
from pix2seg.trainer import (
    TrainConfig,
    discriminator_update,
    evaluate_checkpoint,
    evaluate_predictions,
    generator_update,
    infer,
    train,
)

GEN = nets.GeneratorSpec(base_width=4, depth=2, image_size=16)
DISC = nets.DiscriminatorSpec(base_width=4, n_layers=2)


@pytest.fixture(scope="module")
def pairs16():
    return generate_phantoms(PhantomConfig(count=3, image_size=16, seed=4))


def _cfg(**kw):
    base = dict(model="pix2pix", epochs=2, generator=GEN, discriminator=DISC, seed=9)
    return TrainConfig(**{**base, **kw})


@pytest.mark.parametrize("model", ["pix2pix", "unet"])
def test_training_is_bit_deterministic(pairs16, model):
    c1, l1 = train(_cfg(model=model), pairs16)
    c2, l2 = train(_cfg(model=model), pairs16)
    assert l1.to_csv() == l2.to_csv()
    assert to_bytes(c1) == to_bytes(c2)
    steps = [r[0] for r in l1.rows]
    assert steps == sorted(set(steps)) and len(steps) == 6


def test_seed_changes_the_run(pairs16):
    assert train(_cfg(seed=1), pairs16)[1].to_csv() != train(_cfg(seed=2), pairs16)[1].to_csv()


def test_lambda_zero_gives_pure_adversarial_loss(pairs16):
    _, log = train(_cfg(lam=0.0), pairs16)
    for _, _, g_adv, _, g_total in log.rows:
        assert g_total == g_adv


def test_log_header_and_values(pairs16):
    _, log = train(_cfg(), pairs16)
    lines = log.to_csv().splitlines()
    assert lines[0] == "step,d_loss,g_adv,g_l1,g_total"
    for _, d, adv, l1, tot in log.rows:
        assert tot == pytest.approx(adv + 100 * l1, rel=1e-6)
    _, ulog = train(_cfg(model="unet"), pairs16)
    assert ulog.to_csv().splitlines()[0] == "step,bce"
    assert abs(ulog.rows[0][1] - math.log(2)) < 0.2


def test_discriminator_update_leaves_generator_untouched(pairs16):
    g = nets.build_generator(GEN, Rng(0))
    d = nets.build_discriminator(DISC, Rng(1))
    g_live = g.with_grad()
    x, y = pairs16[0].input, pairs16[0].mask
    with Tape() as g_tape:
        fake = nets.generator_forward(GEN, g_live, x, noise_active=True, rng=Rng(2))
    before = {n: g_live[n].data.copy() for n in g_live.names()}
    new_d, _, _, grads = discriminator_update(DISC, d, AdamState.fresh(d), x, y, fake)
    assert all(g_live[n] not in grads for n in g_live.names())
    assert all(np.array_equal(before[n], g_live[n].data) for n in g_live.names())
    assert any(not np.array_equal(d[n].data, new_d[n].data) for n in d.names())


def test_one_generator_step_reaches_every_layer(pairs16):
    g = nets.build_generator(GEN, Rng(0))
    d = nets.build_discriminator(DISC, Rng(1))
    g_live = g.with_grad()
    x, y = pairs16[0].input, pairs16[0].mask
    with Tape() as g_tape:
        fake = nets.generator_forward(GEN, g_live, x, noise_active=True, rng=Rng(2))
    new_g, _, _ = generator_update(DISC, d, g_live, AdamState.fresh(g), g_tape, x, y, fake, 100.0)
    for layer in g.layers():
        names = [n for n in g.names() if n.rsplit(".", 1)[0] == layer]
        assert any(not np.array_equal(g[n].data, new_g[n].data) for n in names), layer


def test_finiteness_over_200_steps():
    pairs = generate_phantoms(PhantomConfig(count=4, image_size=32, seed=0))
    cfg = TrainConfig(model="pix2pix", epochs=50, generator=nets.GeneratorSpec(base_width=8, depth=3, image_size=32),
                      discriminator=nets.DiscriminatorSpec(base_width=8, n_layers=2), seed=0)
    ckpt, log = train(cfg, pairs)
    assert len(log.rows) == 200
    assert all(math.isfinite(v) for row in log.rows for v in row[1:])
    for ps in ckpt.nets.values():
        assert all(np.max(np.abs(t.data)) <= 1e3 for t in ps.params.values())


def test_config_validation(pairs16):
    for bad in (dict(epochs=0), dict(batch_size=0), dict(lam=-1.0), dict(model="gan")):
        with pytest.raises(ValueError):
            train(_cfg(**bad), pairs16)
    with pytest.raises(ValueError):
        train(_cfg(), [])


def test_max_steps_and_batches(pairs16):
    _, log = train(_cfg(max_steps=4, epochs=10), pairs16)
    assert len(log.rows) == 4
    _, log = train(_cfg(batch_size=2), pairs16)
    assert len(log.rows) == 4


def test_evaluation_identity_and_determinism(pairs16, tmp_path):
    records = evaluate_predictions(pairs16, [p.mask.data for p in pairs16], 0.0)
    assert all(r.accuracy == r.overlap_rate == r.f_measure == 1.0 for r in records)
    ckpt, _ = train(_cfg(), pairs16)
    a = evaluate_checkpoint(ckpt, pairs16)
    assert a.records == evaluate_checkpoint(ckpt, pairs16).records
    assert len(a.records) == len(pairs16)
    save_checkpoint(ckpt, tmp_path / "c.aseg")
    assert evaluate_checkpoint(load_checkpoint(tmp_path / "c.aseg"), pairs16).records == a.records
    with pytest.raises(ValueError):
        evaluate_checkpoint(ckpt, generate_phantoms(PhantomConfig(count=1, image_size=32)))


def test_infer_writes_binary_mask(pairs16, tmp_path):
    ckpt, _ = train(_cfg(), pairs16)
    src = tmp_path / "in.png"
    Image.fromarray(((pairs16[0].input.data[0, 0] + 1) * 127.5).round().astype(np.uint8)).save(src)
    infer(ckpt, src, tmp_path / "a.png", raw_path=tmp_path / "raw.png")
    infer(ckpt, src, tmp_path / "b.png")
    out = np.asarray(Image.open(tmp_path / "a.png"))
    assert set(np.unique(out)) <= {0, 255}
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert (tmp_path / "raw.png").exists()
