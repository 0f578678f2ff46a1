"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"ASEG"                     magic
    u32 version                 currently 1
    u8  model kind              0 = pix2pix, 1 = unet baseline
    spec block, u32 each:       generator in_channels, out_channels, base_width,
                                depth, dropout_p (float32 bit pattern), image_size;
                                pix2pix only: discriminator in_channels,
                                base_width, n_layers
    u32 step counter
    u32 tensor count
    per tensor: u16 name length, name (utf-8), u8 rank, u32 extent * rank,
                float32 payload

Tensor names are ``<net>/<param>`` for trainable tensors,
``<net>/<norm>:running_mean`` / ``:running_var`` for normalization buffers
and ``<net>/<param>:adam_m`` / ``:adam_v`` for optional optimizer moments.
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff.ops import RunningStats
from .autodiff.tensor import Tensor
from .networks import DiscriminatorSpec, GeneratorSpec, ParameterSet
from .objectives import AdamConfig, AdamState

MAGIC = b"ASEG"
VERSION = 1
KINDS = {"pix2pix": 0, "unet": 1}
NETS = {"pix2pix": ("G", "D"), "unet": ("U",)}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str
    generator_spec: GeneratorSpec
    discriminator_spec: Optional[DiscriminatorSpec]
    step: int
    nets: "OrderedDict[str, ParameterSet]"
    optimizers: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CheckpointError(f"unknown model kind {self.kind!r}")
        if list(self.nets) != list(NETS[self.kind]):
            raise CheckpointError(f"{self.kind} checkpoint needs nets {NETS[self.kind]}, got {list(self.nets)}")


def _f32_bits(x: float) -> int:
    return struct.unpack("<I", struct.pack("<f", x))[0]


def _bits_f32(b: int) -> float:
    return struct.unpack("<f", struct.pack("<I", b))[0]


def _tensor_entries(ckpt: Checkpoint):
    for net, ps in ckpt.nets.items():
        for name, t in ps.params.items():
            yield f"{net}/{name}", t.data
        for name, stats in ps.buffers.items():
            yield f"{net}/{name}:running_mean", stats.mean
            yield f"{net}/{name}:running_var", stats.var
        opt = ckpt.optimizers.get(net)
        if opt is not None:
            for name in ps.params:
                yield f"{net}/{name}:adam_m", opt.m[name]
                yield f"{net}/{name}:adam_v", opt.v[name]


def to_bytes(ckpt: Checkpoint) -> bytes:
    g = ckpt.generator_spec
    out = bytearray(MAGIC)
    out += struct.pack("<IB", VERSION, KINDS[ckpt.kind])
    out += struct.pack("<6I", g.in_channels, g.out_channels, g.base_width, g.depth,
                       _f32_bits(g.dropout_p), g.image_size)
    if ckpt.kind == "pix2pix":
        d = ckpt.discriminator_spec
        out += struct.pack("<3I", d.in_channels, d.base_width, d.n_layers)
    entries = list(_tensor_entries(ckpt))
    out += struct.pack("<II", ckpt.step, len(entries))
    for name, arr in entries:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(f"truncated payload while reading {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, got {bytes(buf[:4])!r}")
    r.pos = 4
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    (kind_code,) = r.unpack("<B", "model kind")
    kinds = {v: k for k, v in KINDS.items()}
    if kind_code not in kinds:
        raise CheckpointError(f"unknown model kind byte {kind_code}")
    kind = kinds[kind_code]
    gi, go, gw, gd, gp, gs = r.unpack("<6I", "generator spec")
    gen = GeneratorSpec(gi, go, gw, gd, _bits_f32(gp), gs)
    disc = None
    if kind == "pix2pix":
        disc = DiscriminatorSpec(*r.unpack("<3I", "discriminator spec"))
    step, count = r.unpack("<II", "tensor count")

    nets: "OrderedDict[str, ParameterSet]" = OrderedDict((n, ParameterSet()) for n in NETS[kind])
    moments: dict[str, dict[str, dict[str, np.ndarray]]] = {n: {"m": {}, "v": {}} for n in NETS[kind]}
    pending_stats: dict[tuple[str, str], dict[str, np.ndarray]] = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"name of tensor #{i}")
        name = r.take(nlen, f"name of tensor #{i}").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of tensor {name!r}")
        dims = r.unpack(f"<{rank}I", f"extents of tensor {name!r}")
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n, f"tensor {name!r}"), dtype="<f4").astype(np.float32).reshape(dims)
        net, _, rest = name.partition("/")
        if net not in nets:
            raise CheckpointError(f"tensor {name!r} belongs to unknown net {net!r}")
        pname, _, suffix = rest.partition(":")
        if suffix == "":
            nets[net].params[pname] = Tensor._wrap(arr, False)
        elif suffix in ("running_mean", "running_var"):
            pending_stats.setdefault((net, pname), {})[suffix] = arr
        elif suffix in ("adam_m", "adam_v"):
            moments[net][suffix[-1]][pname] = arr
        else:
            raise CheckpointError(f"tensor {name!r} has unknown suffix {suffix!r}")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last tensor")

    for (net, norm), parts in pending_stats.items():
        stats = RunningStats(parts["running_mean"].shape[0])
        stats.mean, stats.var = parts["running_mean"], parts["running_var"]
        nets[net].buffers[norm] = stats
    optimizers = {}
    for net, mv in moments.items():
        if mv["m"]:
            order = list(nets[net].params)
            optimizers[net] = AdamState(AdamConfig(), OrderedDict((k, mv["m"][k]) for k in order),
                                        OrderedDict((k, mv["v"][k]) for k in order), step)
    return Checkpoint(kind, gen, disc, step, nets, optimizers)


def save_checkpoint(ckpt: Checkpoint, path: os.PathLike) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: os.PathLike) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(buf)
