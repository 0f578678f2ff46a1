"""End-to-end acceptance criteria, one test each.

Every test appends a PASS/FAIL line to ``RESULTS``; conftest prints them
in the terminal summary.
"""

import contextlib
import math
import time

import numpy as np
import pytest

from pix2seg.autodiff import Rng, Tensor
from pix2seg.checkpoint import load_checkpoint, save_checkpoint
from pix2seg.cli import main
from pix2seg.data import PhantomConfig, generate_phantoms, save_image
from pix2seg.diagnostics import gradient_suite
from pix2seg.evaluation import (
    MethodSummary,
    SummaryRow,
    metric_record,
    read_records_csv,
    render_report,
    summarize_all,
)
from pix2seg.networks import DiscriminatorSpec, GeneratorSpec
from pix2seg.objectives import (
    AdamConfig,
    discriminator_loss,
    generator_adversarial_loss,
    generator_total_loss,
    l1_loss,
)
from pix2seg.trainer import TrainConfig, evaluate_checkpoint, infer, train

RESULTS: list[str] = []

# small networks that overfit 64x64 phantoms inside the step budget
OVERFIT_GEN = GeneratorSpec(base_width=8, depth=4, image_size=64)
OVERFIT_DISC = DiscriminatorSpec(base_width=8, n_layers=3)
OVERFIT_LR = 5e-3
TINY_FLAGS = ["--image-size", "64", "--base-width", "8", "--depth", "4", "--disc-width", "8",
              "--disc-layers", "3", "--lr", str(OVERFIT_LR)]


@contextlib.contextmanager
def criterion(label: str):
    info: dict = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException:
        RESULTS.append(f"FAIL  {label}  {info.get('detail', '')}  [{time.perf_counter() - t0:.1f}s]")
        raise
    RESULTS.append(f"PASS  {label}  {info.get('detail', '')}  [{time.perf_counter() - t0:.1f}s]")


def test_c1_gradient_suite():
    with criterion("1 gradient suite (ops <= 1e-4, graphs <= 1e-3, < 2 min)") as info:
        t0 = time.perf_counter()
        results = gradient_suite(0)
        elapsed = time.perf_counter() - t0
        worst_op = max(r.error for r in results if r.tolerance == 1e-4)
        worst_graph = max(r.error for r in results if r.tolerance == 1e-3)
        info["detail"] = f"{len(results)} checks, worst op {worst_op:.1e}, worst graph {worst_graph:.1e}"
        assert all(r.ok for r in results), [r for r in results if not r.ok]
        assert any("generator loss graph" in r.name for r in results)
        assert any("discriminator loss graph" in r.name for r in results)
        assert elapsed < 120


def test_c2_loss_identities():
    with criterion("2 loss identities") as info:
        z = Tensor.zeros((1, 1, 7, 7), dtype=np.float64)
        d_total = discriminator_loss(z, z)[2].item()
        g_adv = generator_adversarial_loss(z).item()
        assert abs(d_total - 2 * math.log(2)) <= 1e-6
        assert abs(g_adv - math.log(2)) <= 1e-6
        x = Tensor.gaussian((2, 1, 8, 8), 0, 1, Rng(0))
        assert l1_loss(x, x).item() == 0.0
        for dtype in (np.float32, np.float64):
            adv = Tensor.from_values((), [0.7], dtype=dtype)
            l1 = Tensor.from_values((), [0.01], dtype=dtype)
            got = generator_total_loss(adv, l1, 100.0).item()
            t = np.dtype(dtype).type
            assert got == float(t(0.7) + t(100.0) * t(0.01))
        info["detail"] = f"d={d_total:.9f} g_adv={g_adv:.9f}"


def _oracle(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        tp += p and g
        fp += p and not g
        fn += g and not p
        tn += not p and not g
    acc = (tp + tn) / 64
    iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    if tp:
        prec, rec = tp / (tp + fp), tp / (tp + fn)
        f = 2 * prec * rec / (prec + rec)
    else:
        f = 0.0 if fp or fn else 1.0
    return acc, iou, f


def test_c3_metric_oracle():
    with criterion("3 metric oracle on 1000 random 8x8 pairs") as info:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(1000):
            pred = (rng.uniform(size=(8, 8)) < rng.uniform()).astype(np.uint8)
            gt = (rng.uniform(size=(8, 8)) < rng.uniform()).astype(np.uint8)
            r = metric_record("p", pred, gt)
            assert (r.accuracy, r.overlap_rate, r.f_measure) == _oracle(pred, gt)
            gap = abs(r.f_measure - 2 * r.overlap_rate / (1 + r.overlap_rate))
            worst = max(worst, gap)
        assert worst <= 1e-12
        info["detail"] = f"max dice-jaccard gap {worst:.1e}"


@pytest.fixture(scope="module")
def overfit_pairs():
    return generate_phantoms(PhantomConfig(count=4, image_size=64, seed=1))


@pytest.mark.parametrize("model", ["pix2pix", "unet"])
def test_c4_overfit(model, overfit_pairs, tmp_path):
    with criterion(f"4 overfit {model}: 4 phantoms 64x64, <= 500 steps, train overlap >= 0.95") as info:
        cfg = TrainConfig(model=model, epochs=125, generator=OVERFIT_GEN, discriminator=OVERFIT_DISC,
                          optimizer=AdamConfig(lr=OVERFIT_LR), seed=0, max_steps=500)
        t0 = time.perf_counter()
        ckpt, log = train(cfg, overfit_pairs)
        elapsed = time.perf_counter() - t0
        result = evaluate_checkpoint(ckpt, overfit_pairs)
        overlap = float(np.mean([r.overlap_rate for r in result.records]))
        info["detail"] = f"steps={ckpt.step} mean overlap={overlap:.4f} train={elapsed:.0f}s"
        assert ckpt.step <= 500
        assert overlap >= 0.95
        assert elapsed <= 15 * 60
        # single-image inference on a training phantom
        src = tmp_path / "phantom.png"
        save_image(overfit_pairs[0].input, src)
        mask = infer(ckpt, src, tmp_path / "mask.png")
        assert metric_record("p", mask, overfit_pairs[0].mask01[0, 0]).overlap_rate >= 0.95


def test_c5_compare_pipeline(tmp_path):
    with criterion("5 compare pipeline: 16 train / 8 test, 20 epochs, overlap >= 0.7") as info:
        t0 = time.perf_counter()
        data = tmp_path / "data"
        assert main(["phantom", "--count", "24", "--size", "64", "--seed", "3", "--out", str(data)]) == 0
        overlaps = {}
        for model in ("pix2pix", "unet"):
            run, ev = tmp_path / model, tmp_path / f"{model}_eval"
            split = ["--data", str(data), "--train-count", "16", "--test-count", "8"]
            assert main(["train", "--model", model, "--epochs", "20", "--seed", "0", *split, *TINY_FLAGS,
                         "--out", str(run)]) == 0
            assert main(["eval", "--checkpoint", str(run / "final.aseg"), *split, "--out", str(ev)]) == 0
            records = read_records_csv(ev / "records.csv")
            assert len(records) == 8
            overlaps[model] = float(np.mean([r.overlap_rate for r in records]))
        assert main(["compare", str(tmp_path / "pix2pix_eval"), str(tmp_path / "unet_eval"),
                     "--out", str(tmp_path / "cmp")]) == 0
        lines = (tmp_path / "cmp" / "comparison.txt").read_text().splitlines()
        assert lines[0] == "\tAccuracy\tOverlap rate\tF measure\tTraining time\tTest time"
        assert [ln.split("\t")[0] for ln in lines[1:]] == ["Pix2Pix", "U-Net"]
        for line in lines[1:]:
            cells = line.split("\t")
            assert len(cells) == 6
            for cell in cells[1:4]:
                mean, std = (float(v) for v in cell.split(" ± "))
                assert 0 <= mean <= 1 and 0 <= std <= 1
            assert all(c != "-" for c in cells[4:])
        elapsed = time.perf_counter() - t0
        info["detail"] = f"test overlap pix2pix={overlaps['pix2pix']:.3f} unet={overlaps['unet']:.3f}"
        assert min(overlaps.values()) >= 0.7
        assert elapsed <= 30 * 60


def test_c6_determinism(tmp_path):
    with criterion("6 determinism: repeated train bit-identical, save/load/evaluate equal") as info:
        data = tmp_path / "data"
        assert main(["phantom", "--count", "6", "--size", "64", "--seed", "5", "--out", str(data)]) == 0
        runs = []
        for name in ("first", "second"):
            out = tmp_path / name
            assert main(["train", "--model", "pix2pix", "--data", str(data), "--epochs", "2", "--seed", "1",
                         *TINY_FLAGS, "--out", str(out)]) == 0
            runs.append(out)
        for f in ("trainlog.csv", "final.aseg"):
            assert (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes(), f
        pairs = generate_phantoms(PhantomConfig(count=6, image_size=64, seed=5))
        ckpt, _ = train(TrainConfig(model="pix2pix", epochs=2, generator=OVERFIT_GEN,
                                    discriminator=OVERFIT_DISC, seed=1), pairs)
        save_checkpoint(ckpt, tmp_path / "c.aseg")
        direct = evaluate_checkpoint(ckpt, pairs).records
        assert evaluate_checkpoint(load_checkpoint(tmp_path / "c.aseg"), pairs).records == direct
        info["detail"] = f"{len((runs[0] / 'trainlog.csv').read_text().splitlines()) - 1} logged steps"


def test_c7_protocol_split(tmp_path):
    with criterion("7 protocol: 267 pairs -> 237/30 split and a 67-sample training subset") as info:
        data = tmp_path / "data"
        assert main(["phantom", "--count", "267", "--size", "16", "--seed", "0", "--out", str(data)]) == 0
        counts = {}
        for n in ("237", "67"):
            out = tmp_path / f"split{n}"
            extra = ["--test-count", "30"] if n == "67" else []
            assert main(["train", "--data", str(data), "--train-count", n, *extra, "--max-steps", "1",
                         "--image-size", "16", "--base-width", "4", "--depth", "2", "--disc-width", "4",
                         "--disc-layers", "2", "--epochs", "1", "--out", str(out)]) == 0
            tags = [ln.split("\t")[1] for ln in (out / "manifest.tsv").read_text().splitlines()]
            counts[n] = (tags.count("train"), tags.count("test"))
        assert counts["237"] == (237, 30)
        assert counts["67"] == (67, 30)
        info["detail"] = f"237 -> {counts['237']}, 67 -> {counts['67']}"


def test_c8_report_layout():
    with criterion("8 report layout reproduces the published summary table") as info:
        rows = [SummaryRow("accuracy", 0.5613, 0.9600, 0.9341, 0.0708),
                SummaryRow("overlap_rate", 0.3267, 0.9754, 0.9169, 0.1304),
                SummaryRow("f_measure", 0.4926, 0.9875, 0.9503, 0.0967)]
        text, _ = render_report(rows)
        expected = ("\tminimum\tmaximum\tmean\tstandard deviation\n"
                    "accuracy\t0.5613\t0.9600\t0.9341\t0.0708\n"
                    "overlap rate\t0.3267\t0.9754\t0.9169\t0.1304\n"
                    "F measure\t0.4926\t0.9875\t0.9503\t0.0967\n")
        assert text == expected
        info["detail"] = "3 metric rows verbatim"
