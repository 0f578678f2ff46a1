"""Tensor value type, the recording tape and reverse-mode backward pass."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor extents are invalid or incompatible."""


class Rng:
    """Seeded random stream.

    Wraps a PCG64 generator so every consumer draws from an explicit,
    reproducible state. ``fork`` derives an independent child stream keyed
    by an integer, which keeps e.g. weight init and dropout noise decoupled.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self._key = tuple(_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def fork(self, key: int) -> "Rng":
        return Rng(self.seed, self._key + (int(key),))

    def normal(self, shape: Sequence[int], mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=tuple(shape))

    def uniform(self, shape: Sequence[int], low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=tuple(shape))

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in the half-open range [low, high)."""
        return int(self._gen.integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def state(self) -> dict:
        return self._gen.bit_generator.state


def _check_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise ShapeError(f"every extent must be >= 1, got {dims}")
    return dims


class Tensor:
    """Dense float array with optional gradient tracking.

    The wrapped array is made read-only; operations always produce new
    tensors. 4-D activations use (batch, channel, height, width) order.
    """

    __slots__ = ("data", "track_grad", "__weakref__")

    def __init__(self, data, track_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _infer_dtype(data), copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.track_grad = bool(track_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, track_grad: bool) -> "Tensor":
        # internal fast path: takes ownership of arr without copying
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.track_grad = track_grad
        return t

    # construction ------------------------------------------------------

    @classmethod
    def from_values(cls, dims: Sequence[int], values: Sequence[float], track_grad: bool = False,
                    dtype=DEFAULT_DTYPE) -> "Tensor":
        dims = _check_dims(dims)
        flat = np.asarray(values, dtype=dtype).reshape(-1)
        if flat.size != int(np.prod(dims, dtype=np.int64)):
            raise ShapeError(f"{flat.size} values do not fill dims {dims}")
        return cls._wrap(flat.reshape(dims).copy(), track_grad)

    @classmethod
    def full(cls, dims: Sequence[int], fill: float, track_grad: bool = False,
             dtype=DEFAULT_DTYPE) -> "Tensor":
        dims = _check_dims(dims)
        return cls._wrap(np.full(dims, fill, dtype=dtype), track_grad)

    @classmethod
    def zeros(cls, dims: Sequence[int], track_grad: bool = False, dtype=DEFAULT_DTYPE) -> "Tensor":
        return cls.full(dims, 0.0, track_grad, dtype)

    @classmethod
    def gaussian(cls, dims: Sequence[int], mean: float, std: float, rng: Rng,
                 track_grad: bool = False, dtype=DEFAULT_DTYPE) -> "Tensor":
        dims = _check_dims(dims)
        return cls._wrap(rng.normal(dims, mean, std).astype(dtype), track_grad)

    # inspection --------------------------------------------------------

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def values(self) -> list[float]:
        return self.data.reshape(-1).tolist()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def with_grad(self) -> "Tensor":
        return Tensor._wrap(self.data, True)

    def astype(self, dtype) -> "Tensor":
        return Tensor._wrap(self.data.astype(dtype), self.track_grad)

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.dtype}, track_grad={self.track_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return DEFAULT_DTYPE


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Append-only record of tracked operations.

    Use as a context manager; operations executed inside the block whose
    inputs track gradients append one node each.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._outputs: set[int] = set()

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> None:
        self.nodes.append(Node(op, inputs, output, backward))
        self._outputs.add(id(output))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


@dataclass
class GradientMap:
    """Gradients keyed by tensor identity. Missing entries read as zero."""

    _entries: dict[int, tuple[Tensor, np.ndarray]] = field(default_factory=dict)

    def __getitem__(self, t: Tensor) -> Tensor:
        entry = self._entries.get(id(t))
        if entry is None or entry[0] is not t:
            return Tensor._wrap(np.zeros_like(t.data), False)
        return Tensor._wrap(entry[1], False)

    def __contains__(self, t: Tensor) -> bool:
        entry = self._entries.get(id(t))
        return entry is not None and entry[0] is t

    def get_array(self, t: Tensor) -> Optional[np.ndarray]:
        entry = self._entries.get(id(t))
        if entry is None or entry[0] is not t:
            return None
        return entry[1]

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[Tensor]:
        return (t for t, _ in self._entries.values())


def backward(loss: Tensor, tape: Tape) -> GradientMap:
    """Reverse sweep over ``tape`` seeded with d loss / d loss = 1."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got dims {loss.dims}")
    if loss not in tape:
        raise ValueError("loss was not produced by an operation recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    keep: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        g_inputs = node.backward(g_out)
        for inp, g in zip(node.inputs, g_inputs):
            if g is None or not inp.track_grad:
                continue
            if g.shape != inp.data.shape:
                raise ShapeError(f"{node.op}: gradient dims {g.shape} != input dims {inp.data.shape}")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                keep[key] = inp
    return GradientMap({k: (keep[k], v) for k, v in grads.items()})
