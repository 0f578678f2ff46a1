"""Command-line entry point: phantom, split, train, eval, infer, gradcheck, compare.

Every option can also come from a flat ``key = value`` file passed with
``--config`` (``#`` starts a comment, keys use underscores). Flags override
file values, and the resolved settings are echoed to ``<out>/config.echo``
so the echo file reproduces the run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DatasetError,
    PhantomConfig,
    generate_phantoms,
    load_split,
    scan_dataset,
    split,
    to_uint8,
)
from .evaluation import (
    MethodSummary,
    MetricError,
    read_records_csv,
    records_csv,
    render_comparison_table,
    render_summary_table,
    summarize_all,
)
from .networks import DiscriminatorSpec, GeneratorSpec, SpecError
from .objectives import AdamConfig
from .trainer import TrainConfig, TrainingDiverged, evaluate_checkpoint, infer, train

logger = logging.getLogger("pix2seg")

DEFAULT_TRAIN_FRACTION = 237 / 267


class UsageError(Exception):
    """Bad user input detected after argument parsing (exit code 2)."""


# typed option parsing ------------------------------------------------------


def _int_in(lo: int, hi: Optional[int] = None) -> Callable[[str], int]:
    def parse(text: str) -> int:
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
        if v < lo or (hi is not None and v > hi):
            rng = f"[{lo}, {hi}]" if hi is not None else f">= {lo}"
            raise argparse.ArgumentTypeError(f"value {v} out of range {rng}")
        return v
    parse.__name__ = "int"
    return parse


def _float_in(lo: float, hi: Optional[float] = None, hi_open: bool = False) -> Callable[[str], float]:
    def parse(text: str) -> float:
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
        bad_hi = hi is not None and (v >= hi if hi_open else v > hi)
        if not np.isfinite(v) or v < lo or bad_hi:
            bound = f"{')' if hi_open else ']'}" if hi is not None else ""
            rng = f"[{lo}, {hi}{bound}" if hi is not None else f">= {lo}"
            raise argparse.ArgumentTypeError(f"value {v} out of range {rng}")
        return v
    parse.__name__ = "float"
    return parse


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise argparse.ArgumentTypeError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    parse.__name__ = "choice"
    return parse


def _path(text: str) -> str:
    return text


@dataclass(frozen=True)
class Opt:
    name: str  # key form, underscores
    parse: Callable[[str], Any]
    default: Any
    help: str
    required: bool = False
    aliases: tuple[str, ...] = ()

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


SEED = Opt("seed", _int_in(0, 2**63 - 1), 0, "random seed")
OUT = Opt("out", _path, None, "output directory", required=True)
DATA = Opt("data", _path, None, "dataset root with images/ and masks/", required=True)
SPLIT_OPTS = [
    Opt("train_count", _int_in(0), None, "training-set size (default: 237/267 of the data)"),
    Opt("test_count", _int_in(0), None, "test-set size, taken from the end (default: all remaining)"),
    Opt("split_seed", _int_in(0, 2**63 - 1), None, "shuffle before splitting (default: sorted prefix)"),
]

COMMANDS: dict[str, list[Opt]] = {
    "phantom": [
        Opt("count", _int_in(1), 8, "number of pairs"),
        Opt("image_size", _int_in(16, 4096), 64, "square image extent", aliases=("--size",)),
        Opt("noise_level", _float_in(0.0, 255.0), 8.0, "additive noise std in 8-bit units"),
        SEED, OUT,
    ],
    "split": [DATA, *SPLIT_OPTS, OUT],
    "train": [
        DATA, OUT, SEED,
        Opt("model", _choice("pix2pix", "unet"), "pix2pix", "pix2pix or unet baseline"),
        Opt("image_size", _int_in(4, 4096), 256, "working resolution"),
        Opt("epochs", _int_in(1), 100, "training loops over the training set"),
        Opt("batch_size", _int_in(1), 1, "pairs per optimizer step"),
        Opt("lambda", _float_in(0.0), 100.0, "L1 weight in the generator objective"),
        Opt("lr", _float_in(1e-12, 1.0), 2e-4, "Adam learning rate"),
        Opt("beta1", _float_in(0.0, 1.0, hi_open=True), 0.5, "Adam beta1"),
        Opt("beta2", _float_in(0.0, 1.0, hi_open=True), 0.999, "Adam beta2"),
        Opt("base_width", _int_in(4, 4096), 64, "generator first-layer filters"),
        Opt("depth", _int_in(2, 12), 8, "generator down/up levels"),
        Opt("dropout", _float_in(0.0, 1.0, hi_open=True), 0.5, "generator dropout (noise) probability"),
        Opt("disc_width", _int_in(1, 4096), 64, "discriminator first-layer filters"),
        Opt("disc_layers", _int_in(1, 12), 3, "discriminator stride-2 blocks"),
        Opt("shuffle", _choice("on", "off"), "on", "reshuffle the training order every epoch"),
        Opt("max_steps", _int_in(1), None, "stop after this many optimizer steps"),
        *SPLIT_OPTS,
    ],
    "eval": [
        Opt("checkpoint", _path, None, "checkpoint file", required=True),
        DATA, OUT, SEED,
        Opt("split", _choice("train", "test"), "test", "which split to evaluate"),
        Opt("noise", _choice("on", "off"), "off", "keep generator dropout active"),
        Opt("norm", _choice("batch", "running"), "batch", "normalization statistics at test time"),
        Opt("samples", _int_in(0), 8, "number of input|prediction|truth triptychs to write"),
        *SPLIT_OPTS,
    ],
    "infer": [
        Opt("checkpoint", _path, None, "checkpoint file", required=True),
        Opt("image", _path, None, "input image", required=True),
        OUT, SEED,
        Opt("noise", _choice("on", "off"), "off", "keep generator dropout active"),
        Opt("raw", _choice("on", "off"), "off", "also write the pre-threshold output"),
    ],
    "gradcheck": [
        SEED,
        Opt("out", _path, None, "optional directory for gradcheck.txt"),
    ],
    "compare": [
        Opt("labels", _path, "Pix2Pix,U-Net", "comma-separated row labels"),
        OUT,
    ],
}


def read_config_file(path: str, opts: Sequence[Opt]) -> dict[str, Any]:
    known = {o.name: o for o in opts}
    values: dict[str, Any] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip().replace("-", "_"), value.strip()
        if not sep or not key:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = known[key].parse(value)
        except argparse.ArgumentTypeError as exc:
            raise UsageError(f"{path}:{lineno}: {key}: {exc}") from None
    return values


def resolve(command: str, args: argparse.Namespace) -> dict[str, Any]:
    opts = COMMANDS[command]
    resolved = {o.name: o.default for o in opts}
    if getattr(args, "config", None):
        resolved.update(read_config_file(args.config, opts))
    for o in opts:
        v = getattr(args, o.name)
        if v is not None:
            resolved[o.name] = v
    missing = [o.flag for o in opts if o.required and resolved.get(o.name) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s) {', '.join(missing)}")
    return resolved


def echo_config(command: str, cfg: dict[str, Any], out: Path) -> None:
    lines = [f"# pix2seg {__version__} {command}"]
    lines += [f"{k} = {v}" for k, v in cfg.items() if v is not None]
    (out / "config.echo").write_text("\n".join(lines) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pix2seg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file; flags override it")
        if name == "compare":
            p.add_argument("reports", nargs=2, metavar="REPORT",
                           help="run directory containing records.csv, or a records.csv file")
        for o in opts:
            p.add_argument(o.flag, *o.aliases, dest=o.name, type=o.parse, default=None, help=o.help)
    return parser


# subcommands ---------------------------------------------------------------


def _outdir(cfg: dict[str, Any]) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split_manifest(cfg: dict[str, Any]):
    manifest = scan_dataset(cfg["data"])
    n_train = cfg.get("train_count")
    if n_train is None:
        n_train = int(round(len(manifest) * DEFAULT_TRAIN_FRACTION))
    return split(manifest, n_train, seed=cfg.get("split_seed"), n_test=cfg.get("test_count"))


def cmd_phantom(cfg: dict[str, Any]) -> int:
    out = _outdir(cfg)
    pcfg = PhantomConfig(count=cfg["count"], image_size=cfg["image_size"], seed=cfg["seed"],
                         noise_level=cfg["noise_level"])
    pairs = generate_phantoms(pcfg, out)
    echo_config("phantom", cfg, out)
    print(f"wrote {len(pairs)} phantom pairs to {out}")
    return 0


def cmd_split(cfg: dict[str, Any]) -> int:
    out = _outdir(cfg)
    manifest = _split_manifest(cfg)
    manifest.write_tsv(out / "manifest.tsv")
    echo_config("split", cfg, out)
    print(f"train {len(manifest.subset('train'))} / test {len(manifest.subset('test'))} "
          f"of {len(manifest)} pairs")
    return 0


def _write_timings(out: Path, **values: float) -> None:
    path = out / "timings.txt"
    current = _read_timings(path)
    current.update({k: v for k, v in values.items() if v is not None})
    path.write_text("".join(f"{k} = {v!r}\n" for k, v in current.items()))


def _read_timings(path: Path) -> dict[str, float]:
    if not path.is_file():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        key, sep, value = line.partition("=")
        if sep:
            try:
                out[key.strip()] = float(value)
            except ValueError:
                continue
    return out


def train_config_from(cfg: dict[str, Any]) -> TrainConfig:
    size = cfg["image_size"]
    return TrainConfig(
        model=cfg["model"], epochs=cfg["epochs"], batch_size=cfg["batch_size"], lam=cfg["lambda"],
        generator=GeneratorSpec(1, 1, cfg["base_width"], cfg["depth"], cfg["dropout"], size),
        discriminator=DiscriminatorSpec(2, cfg["disc_width"], cfg["disc_layers"]),
        optimizer=AdamConfig(cfg["lr"], cfg["beta1"], cfg["beta2"]),
        seed=cfg["seed"], shuffle=cfg["shuffle"] == "on", max_steps=cfg.get("max_steps"))


def cmd_train(cfg: dict[str, Any]) -> int:
    tcfg = train_config_from(cfg)
    tcfg.validate()
    manifest = _split_manifest(cfg)
    pairs = load_split(manifest, "train", tcfg.image_size)
    if not pairs:
        raise UsageError("training split is empty")
    out = _outdir(cfg)
    echo_config("train", cfg, out)
    manifest.write_tsv(out / "manifest.tsv")
    ckpt, log = train(tcfg, pairs)
    (out / "trainlog.csv").write_text(log.to_csv())
    save_checkpoint(ckpt, out / "final.aseg")
    _write_timings(out, train_seconds=log.train_seconds)
    print(f"trained {tcfg.model} for {ckpt.step} steps on {len(pairs)} pairs -> {out / 'final.aseg'}")
    return 0


def _triptych(x: np.ndarray, pred_mask: np.ndarray, truth: np.ndarray) -> np.ndarray:
    s = x.shape[-1]
    sep = np.full((s, 2), 128, dtype=np.uint8)
    return np.concatenate([to_uint8(x.reshape(s, s)), sep, (pred_mask.reshape(s, s) * 255).astype(np.uint8),
                           sep, (truth.reshape(s, s) * 255).astype(np.uint8)], axis=1)


def cmd_eval(cfg: dict[str, Any]) -> int:
    from PIL import Image

    from .evaluation import binarize

    ckpt = load_checkpoint(cfg["checkpoint"])
    manifest = _split_manifest(cfg)
    pairs = load_split(manifest, cfg["split"], ckpt.generator_spec.image_size)
    if not pairs:
        raise UsageError(f"{cfg['split']} split is empty")
    out = _outdir(cfg)
    echo_config("eval", cfg, out)
    norm = "batch" if cfg["norm"] == "batch" else "eval"
    result = evaluate_checkpoint(ckpt, pairs, noise=cfg["noise"] == "on", seed=cfg["seed"], norm_mode=norm)
    (out / "records.csv").write_text(records_csv(result.records))
    table = render_summary_table(result.summary)
    (out / "summary.txt").write_text(table)
    train_seconds = _read_timings(Path(cfg["checkpoint"]).parent / "timings.txt").get("train_seconds")
    _write_timings(out, train_seconds=train_seconds, test_seconds=result.seconds)
    if cfg["samples"]:
        samples = out / "samples"
        samples.mkdir(exist_ok=True)
        threshold = 0.0 if ckpt.kind == "pix2pix" else 0.5
        for p, pred in list(zip(pairs, result.predictions))[:cfg["samples"]]:
            img = _triptych(p.input.data, binarize(pred, threshold), p.mask01)
            Image.fromarray(img).save(samples / f"{p.id}.png")
    print(table, end="")
    return 0


def cmd_infer(cfg: dict[str, Any]) -> int:
    ckpt = load_checkpoint(cfg["checkpoint"])
    out = _outdir(cfg)
    stem = Path(cfg["image"]).stem
    raw = out / f"{stem}_raw.png" if cfg["raw"] == "on" else None
    mask = infer(ckpt, cfg["image"], out / f"{stem}_mask.png", noise=cfg["noise"] == "on", raw_path=raw,
                 seed=cfg["seed"])
    echo_config("infer", cfg, out)
    print(f"wrote {out / (stem + '_mask.png')} ({int(mask.sum())} foreground pixels)")
    return 0


def cmd_gradcheck(cfg: dict[str, Any]) -> int:
    from .diagnostics import format_results, gradient_suite

    results = gradient_suite(cfg["seed"])
    text = format_results(results)
    print(text, end="")
    if cfg.get("out"):
        out = _outdir(cfg)
        (out / "gradcheck.txt").write_text(text)
        echo_config("gradcheck", cfg, out)
    return 0 if all(r.ok for r in results) else 1


def load_method(report: str, label: str) -> MethodSummary:
    path = Path(report)
    records_path = path / "records.csv" if path.is_dir() else path
    records = read_records_csv(records_path)
    if not records:
        raise MetricError(f"{records_path}: no records")
    timings = _read_timings(records_path.parent / "timings.txt")
    return MethodSummary(label, tuple(summarize_all(records)), timings.get("train_seconds"),
                         timings.get("test_seconds"))


def cmd_compare(cfg: dict[str, Any], reports: Sequence[str]) -> int:
    labels = [s.strip() for s in cfg["labels"].split(",")]
    if len(labels) != 2:
        raise UsageError("--labels needs exactly two comma-separated labels")
    methods = [load_method(r, lab) for r, lab in zip(reports, labels)]
    table = render_comparison_table(methods)
    out = _outdir(cfg)
    (out / "comparison.txt").write_text(table)
    echo_config("compare", cfg, out)
    print(table, end="")
    return 0


HANDLERS = {
    "phantom": cmd_phantom, "split": cmd_split, "train": cmd_train, "eval": cmd_eval,
    "infer": cmd_infer, "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        if args.command == "compare":
            return cmd_compare(cfg, args.reports)
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"pix2seg {args.command}: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, MetricError, SpecError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"pix2seg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
