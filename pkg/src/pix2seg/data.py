"""Paired image/mask ingestion, splitting and synthetic lung phantoms.

Dataset layout on disk::

    <root>/images/<stem>.png
    <root>/masks/<stem>.png

Images are scaled from [0, 255] to [-1, 1]. Masks are thresholded at 127
to {0, 1}; the generator target is the {-1, +1} view of the same mask.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .autodiff.tensor import Rng, Tensor

MASK_THRESHOLD = 127
SPLITS = ("train", "test")


class DatasetError(ValueError):
    pass


@dataclass
class SamplePair:
    id: str
    input: Tensor  # [1, 1, S, S] in [-1, 1]
    mask: Tensor  # [1, 1, S, S] in {-1, +1}

    @property
    def mask01(self) -> np.ndarray:
        return (self.mask.data > 0).astype(np.uint8)

    def check(self) -> None:
        if self.input.dims != self.mask.dims:
            raise DatasetError(f"{self.id}: input dims {self.input.dims} != mask dims {self.mask.dims}")
        if self.input.data.min() < -1 or self.input.data.max() > 1:
            raise DatasetError(f"{self.id}: input outside [-1, 1]")
        if not np.all(np.isin(self.mask.data, (-1.0, 1.0))):
            raise DatasetError(f"{self.id}: mask not two-valued")


@dataclass(frozen=True)
class ManifestEntry:
    stem: str
    image: Path
    mask: Path
    split: Optional[str] = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def to_tsv(self) -> str:
        return "".join(f"{e.stem}\t{e.split or ''}\n" for e in self.entries)

    def write_tsv(self, path: os.PathLike) -> None:
        Path(path).write_text(self.to_tsv())


def scan_dataset(root: os.PathLike) -> DatasetManifest:
    """Pair ``images/*.png`` with ``masks/*.png`` by stem, sorted by stem."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    for d in (img_dir, mask_dir):
        if not d.is_dir():
            raise DatasetError(f"missing directory {d}")
    images = {p.stem: p for p in img_dir.glob("*.png")}
    masks = {p.stem: p for p in mask_dir.glob("*.png")}
    orphans = sorted(set(images) ^ set(masks))
    if orphans:
        raise DatasetError(f"unmatched stems (image without mask or mask without image): {', '.join(orphans)}")
    return DatasetManifest([ManifestEntry(s, images[s], masks[s]) for s in sorted(images)])


def split(manifest: DatasetManifest, n_train: int, seed: Optional[int] = None,
          n_test: Optional[int] = None) -> DatasetManifest:
    """Tag entries train/test.

    Without ``seed`` the first ``n_train`` entries in manifest order are the
    training set; with ``seed`` the order is shuffled reproducibly first.
    ``n_test`` keeps only the last ``n_test`` entries as the test set, so a
    smaller training subset can share the test set of a larger split; the
    entries in between are left untagged.
    """
    total = len(manifest)
    if n_train < 0 or n_train > total:
        raise DatasetError(f"n_train={n_train} outside 0..{total}")
    remaining = total - n_train
    if n_test is None:
        n_test = remaining
    if n_test < 0 or n_test > remaining:
        raise DatasetError(f"n_test={n_test} outside 0..{remaining}")
    order = list(range(total))
    if seed is not None:
        order = [int(i) for i in Rng(seed).permutation(total)]
    tags: list[Optional[str]] = [None] * total
    for rank, idx in enumerate(order):
        if rank < n_train:
            tags[idx] = "train"
        elif rank >= total - n_test:
            tags[idx] = "test"
    return DatasetManifest([replace(e, split=t) for e, t in zip(manifest.entries, tags)])


def _read_gray(path: Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            im.load()
            return im.convert("L")
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def image_to_input(arr: np.ndarray) -> np.ndarray:
    # subtract first: exact for 8-bit inputs, avoids cancellation near mid-gray
    return ((arr.astype(np.float32) - np.float32(127.5)) / np.float32(127.5)).astype(np.float32)


def mask_to_target(arr: np.ndarray) -> np.ndarray:
    return np.where(arr > MASK_THRESHOLD, 1.0, -1.0).astype(np.float32)


def pair_from_arrays(stem: str, image: np.ndarray, mask: np.ndarray) -> SamplePair:
    s = image.shape
    x = Tensor._wrap(image_to_input(image).reshape(1, 1, *s), False)
    y = Tensor._wrap(mask_to_target(mask).reshape(1, 1, *s), False)
    return SamplePair(stem, x, y)


def load_pair(entry: ManifestEntry, target_size: int) -> SamplePair:
    img = _read_gray(entry.image)
    msk = _read_gray(entry.mask)
    if 0 in img.size or 0 in msk.size:
        raise DatasetError(f"{entry.stem}: zero-extent image")
    size = (target_size, target_size)
    if img.size != size:
        img = img.resize(size, Image.BILINEAR)
    if msk.size != size:
        msk = msk.resize(size, Image.NEAREST)
    return pair_from_arrays(entry.stem, np.asarray(img), np.asarray(msk))


def load_split(manifest: DatasetManifest, which: str, target_size: int) -> list[SamplePair]:
    return [load_pair(e, target_size) for e in manifest.subset(which)]


def to_uint8(values: np.ndarray, value_range: str = "tanh") -> np.ndarray:
    if value_range == "tanh":
        scaled = (np.asarray(values, dtype=np.float64) + 1.0) * 127.5
    elif value_range == "unit":
        scaled = np.asarray(values, dtype=np.float64) * 255.0
    else:
        raise ValueError(f"value_range must be 'tanh' or 'unit', got {value_range!r}")
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def save_image(values, path: os.PathLike, value_range: str = "tanh") -> None:
    """Write a 2-D (or [1,1,H,W]) array as an 8-bit grayscale PNG.

    ``value_range`` is ``tanh`` for [-1, 1] data or ``unit`` for [0, 1].
    """
    arr = values.data if isinstance(values, Tensor) else np.asarray(values)
    arr = arr.reshape(arr.shape[-2:])
    path = Path(path)
    try:
        Image.fromarray(to_uint8(arr, value_range)).save(path, format="PNG")
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc


def read_image(path: os.PathLike, value_range: str = "tanh") -> np.ndarray:
    arr = np.asarray(_read_gray(Path(path)), dtype=np.float64)
    return arr / 127.5 - 1.0 if value_range == "tanh" else arr / 255.0


# phantoms -----------------------------------------------------------------


@dataclass(frozen=True)
class PhantomConfig:
    count: int = 8
    image_size: int = 64
    seed: int = 0
    noise_level: float = 8.0  # std of additive noise, 8-bit units
    background: tuple[int, int] = (10, 40)
    body: tuple[int, int] = (150, 200)
    lung: tuple[int, int] = (50, 90)

    def validate(self) -> None:
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.image_size < 16:
            raise ValueError(f"image_size must be >= 16, got {self.image_size}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be non-negative")


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    ax: float
    ay: float

    def contains(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return ((xs - self.cx) / self.ax) ** 2 + ((ys - self.cy) / self.ay) ** 2 <= 1.0


@dataclass(frozen=True)
class PhantomGeometry:
    body: Ellipse
    lungs: tuple[Ellipse, Ellipse]
    levels: tuple[int, int, int]  # background, body, lung


def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(c, c, indexing="xy")


def phantom_geometry(rng: Rng, cfg: PhantomConfig) -> PhantomGeometry:
    s = float(cfg.image_size)
    u = lambda lo, hi: float(rng.uniform((), lo, hi))  # noqa: E731
    body = Ellipse(s * u(0.48, 0.52), s * u(0.48, 0.52), s * u(0.40, 0.46), s * u(0.32, 0.40))
    lungs = []
    for side in (-1, 1):
        lungs.append(Ellipse(body.cx + side * s * u(0.16, 0.21), body.cy + s * u(-0.03, 0.03),
                             s * u(0.09, 0.13), s * u(0.17, 0.24)))
    levels = (int(rng.integers(cfg.background[0], cfg.background[1] + 1)),
              int(rng.integers(cfg.body[0], cfg.body[1] + 1)),
              int(rng.integers(cfg.lung[0], cfg.lung[1] + 1)))
    return PhantomGeometry(body, (lungs[0], lungs[1]), levels)


def render_phantom(geom: PhantomGeometry, cfg: PhantomConfig, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = _pixel_grid(cfg.image_size)
    in_body = geom.body.contains(xs, ys)
    in_lung = geom.lungs[0].contains(xs, ys) | geom.lungs[1].contains(xs, ys)
    bg, body, lung = geom.levels
    img = np.full(xs.shape, float(bg))
    img[in_body] = body
    img[in_lung] = lung
    if cfg.noise_level > 0:
        img = img + rng.normal(img.shape, 0.0, cfg.noise_level)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    mask = np.where(in_lung, 255, 0).astype(np.uint8)
    return image, mask


def generate_phantoms(cfg: PhantomConfig, out_dir: Optional[os.PathLike] = None) -> list[SamplePair]:
    """Synthetic lung-like image/mask pairs, deterministic in ``cfg.seed``.

    When ``out_dir`` is given the pairs are also written in the dataset
    layout, so :func:`scan_dataset` + :func:`load_pair` reproduce them.
    """
    cfg.validate()
    root = Rng(cfg.seed)
    width = max(4, len(str(cfg.count - 1)))
    pairs = []
    if out_dir is not None:
        (Path(out_dir) / "images").mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(cfg.count):
        stem = f"phantom_{i:0{width}d}"
        rng = root.fork(i)
        geom = phantom_geometry(rng, cfg)
        image, mask = render_phantom(geom, cfg, rng)
        if out_dir is not None:
            Image.fromarray(image).save(Path(out_dir) / "images" / f"{stem}.png")
            Image.fromarray(mask).save(Path(out_dir) / "masks" / f"{stem}.png")
        pairs.append(pair_from_arrays(stem, image, mask))
    return pairs


def batches(pairs: Sequence[SamplePair], batch_size: int, order: Sequence[int]):
    from .autodiff.ops import stack_batch

    for start in range(0, len(order), batch_size):
        chunk = [pairs[i] for i in order[start:start + batch_size]]
        if len(chunk) == 1:
            yield chunk, chunk[0].input, chunk[0].mask
        else:
            yield chunk, stack_batch([p.input for p in chunk]), stack_batch([p.mask for p in chunk])
