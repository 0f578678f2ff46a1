import struct

import numpy as np
import pytest

from pix2seg.checkpoint import (
    BadMagicError,
    Checkpoint,
    CheckpointError,
    TruncatedPayloadError,
    UnsupportedVersionError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from pix2seg.data import PhantomConfig, generate_phantoms
from pix2seg.networks import DiscriminatorSpec, GeneratorSpec
from pix2seg.trainer import TrainConfig, train


@pytest.fixture(scope="module")
def trained():
    pairs = generate_phantoms(PhantomConfig(count=2, image_size=16, seed=3))
    cfg = TrainConfig(model="pix2pix", epochs=1, generator=GeneratorSpec(base_width=4, depth=2, image_size=16),
                      discriminator=DiscriminatorSpec(base_width=4, n_layers=2), seed=2)
    return train(cfg, pairs)[0]


def _assert_same(a: Checkpoint, b: Checkpoint):
    assert (a.kind, a.generator_spec, a.discriminator_spec, a.step) == (b.kind, b.generator_spec,
                                                                        b.discriminator_spec, b.step)
    for net in a.nets:
        pa, pb = a.nets[net], b.nets[net]
        assert pa.names() == pb.names()
        for n in pa.names():
            assert pa[n].data.tobytes() == pb[n].data.tobytes()
        assert list(pa.buffers) == list(pb.buffers)
        for n in pa.buffers:
            assert pa.buffers[n].mean.tobytes() == pb.buffers[n].mean.tobytes()
            assert pa.buffers[n].var.tobytes() == pb.buffers[n].var.tobytes()
    for net, st in a.optimizers.items():
        for k in st.m:
            assert st.m[k].tobytes() == b.optimizers[net].m[k].tobytes()
            assert st.v[k].tobytes() == b.optimizers[net].v[k].tobytes()


def test_round_trip_is_bitwise(trained, tmp_path):
    path = tmp_path / "c.aseg"
    save_checkpoint(trained, path)
    loaded = load_checkpoint(path)
    _assert_same(trained, loaded)
    assert to_bytes(loaded) == path.read_bytes()


def test_header_layout(trained):
    buf = to_bytes(trained)
    assert buf[:4] == b"ASEG"
    assert struct.unpack("<I", buf[4:8])[0] == 1
    assert buf[8] == 0
    gi, go, gw, gd, _, gs = struct.unpack("<6I", buf[9:33])
    assert (gi, go, gw, gd, gs) == (1, 1, 4, 2, 16)


def test_bad_magic(trained):
    buf = bytearray(to_bytes(trained))
    buf[0:4] = b"NOPE"
    with pytest.raises(BadMagicError):
        from_bytes(bytes(buf))


def test_unsupported_version(trained):
    buf = bytearray(to_bytes(trained))
    buf[4:8] = struct.pack("<I", 7)
    with pytest.raises(UnsupportedVersionError):
        from_bytes(bytes(buf))


def test_truncation_names_the_tensor(trained):
    buf = to_bytes(trained)
    last = list(trained.optimizers["D"].v)[-1]
    with pytest.raises(TruncatedPayloadError) as info:
        from_bytes(buf[:-2])
    assert f"D/{last}:adam_v" in str(info.value)


def test_errors_are_distinct_subclasses():
    assert issubclass(BadMagicError, CheckpointError)
    assert not issubclass(BadMagicError, TruncatedPayloadError)
    assert not issubclass(UnsupportedVersionError, BadMagicError)
    with pytest.raises(CheckpointError):
        load_checkpoint("/nonexistent/c.aseg")
