"""Dense tensors, the gradient tape, and retained-buffer accounting.

A :class:`Tensor` wraps an immutable numpy array. Differentiable primitives in
:mod:`revcol.ops` append entries to the innermost active :class:`Tape` while it
is recording. Each entry holds only integer identities of its operands plus the
arrays its gradient rule needs, so the bytes a tape keeps alive are exactly the
bytes it reports to :data:`METER`.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "Grads",
    "Rng",
    "RetentionMeter",
    "METER",
    "ShapeError",
    "get_dtype",
    "set_precision",
    "precision",
    "current_tape",
    "no_tape",
    "Retained",
]


class ShapeError(ValueError):
    """Operand extents disagree. ``axis`` names the offending axis."""

    def __init__(self, message: str, axis: str | int | None = None):
        super().__init__(message)
        self.axis = axis


# ---------------------------------------------------------------- precision

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype: type = np.float64


def get_dtype() -> type:
    return _dtype


def set_precision(name: str) -> None:
    """Select the global floating point type (``"f32"`` or ``"f64"``)."""
    global _dtype
    try:
        _dtype = _PRECISIONS[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}") from None


@contextmanager
def precision(name: str) -> Iterator[None]:
    old = {v: k for k, v in _PRECISIONS.items()}[_dtype]
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


# ------------------------------------------------------------------ tensors

_uids = itertools.count(1)


class Tensor:
    """Immutable dense array with an identity used by the tape."""

    __slots__ = ("data", "requires_grad", "uid", "name", "__weakref__")
    is_param = False

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, *, copy: bool = False):
        arr = np.array(data, dtype=_dtype) if copy else np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.uid = next(_uids)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.uid = next(_uids)
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self, requires_grad: bool = False) -> "Tensor":
        """A fresh leaf sharing this tensor's buffer."""
        return Tensor._wrap(self.data, requires_grad)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"{type(self).__name__}{label}(shape={self.shape}, dtype={self.dtype})"

    # arithmetic sugar; the real work lives in revcol.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not a primitive; multiply by a reciprocal")
        return ops.scale(self, 1.0 / other)


class Parameter(Tensor):
    """A learnable leaf. ``data`` is rebound (never mutated in place) by updates."""

    __slots__ = ()
    is_param = True

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=_dtype), requires_grad=True, name=name)

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError(f"cannot assign {value.shape} to parameter of shape {self.data.shape}")
        self.data = value


# ------------------------------------------------------------ memory meter

def _root(a: np.ndarray) -> np.ndarray:
    while True:
        base = a.base
        if isinstance(base, np.ndarray):
            a = base
        elif base is not None and isinstance(getattr(base, "base", None), np.ndarray):
            a = base.base
        else:
            return a


class RetentionMeter:
    """Counts live buffers tagged "retained-for-backward".

    Views share their owner's buffer, so accounting is per root allocation and
    reference counted. Parameter storage is never passed in.
    """

    def __init__(self) -> None:
        self._live: dict[int, list] = {}
        self.live_bytes = 0
        self.peak_bytes = 0
        self.peak_count = 0

    @property
    def live_count(self) -> int:
        return len(self._live)

    def hold(self, arr: np.ndarray) -> int:
        root = _root(arr)
        key = id(root)
        slot = self._live.get(key)
        if slot is None:
            self._live[key] = [root, 1]
            self.live_bytes += root.nbytes
            if self.live_bytes > self.peak_bytes:
                self.peak_bytes = self.live_bytes
            if len(self._live) > self.peak_count:
                self.peak_count = len(self._live)
        else:
            slot[1] += 1
        return key

    def drop(self, key: int) -> None:
        slot = self._live[key]
        slot[1] -= 1
        if slot[1] == 0:
            del self._live[key]
            self.live_bytes -= slot[0].nbytes

    def reset_peak(self) -> None:
        self.peak_bytes = self.live_bytes
        self.peak_count = len(self._live)


METER = RetentionMeter()


class Retained:
    """Holds a group of arrays on the meter until released."""

    def __init__(self, arrays: Iterable[np.ndarray] = ()):
        self._keys: list[int] = []
        for a in arrays:
            self.add(a)

    def add(self, arr: np.ndarray) -> None:
        self._keys.append(METER.hold(arr))

    def release(self) -> None:
        for k in self._keys:
            METER.drop(k)
        self._keys.clear()


# -------------------------------------------------------------------- tape

_tapes: list["Tape"] = []


def current_tape() -> "Tape | None":
    return _tapes[-1] if _tapes else None


def is_recording() -> bool:
    return bool(_tapes) and _tapes[-1].recording


@dataclass
class _Entry:
    rule: Callable
    inputs: tuple[int | None, ...]
    output: int
    saved: tuple
    keys: list[int] = field(default_factory=list)


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager to make it the active tape. ``paused()`` suspends
    recording: nothing is appended and nothing is saved.
    """

    def __init__(self) -> None:
        self.entries: list[_Entry] = []
        self.recording = True
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    @contextmanager
    def paused(self) -> Iterator["Tape"]:
        was = self.recording
        self.recording = False
        try:
            yield self
        finally:
            self.recording = was

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, t: Tensor) -> bool:
        return t.uid in self._outputs

    def record(self, rule: Callable, inputs: Sequence[Tensor | None], output: Tensor,
               saved: Sequence, activations: Sequence[np.ndarray] = ()) -> None:
        entry = _Entry(rule, tuple(None if t is None or not t.requires_grad else t.uid for t in inputs),
                       output.uid, tuple(saved))
        for a in activations:
            entry.keys.append(METER.hold(a))
        self.entries.append(entry)
        self._outputs.add(output.uid)

    def _free(self, entry: _Entry) -> None:
        for k in entry.keys:
            METER.drop(k)
        entry.keys.clear()
        entry.saved = ()

    def clear(self) -> None:
        for e in self.entries:
            self._free(e)
        self.entries.clear()
        self._outputs.clear()

    def __del__(self):
        try:
            self.clear()
        except Exception:
            pass


@contextmanager
def no_tape() -> Iterator[None]:
    """Run a region where nothing records, whatever tape is active outside."""
    t = Tape()
    t.recording = False
    with t:
        yield


class Grads(dict):
    """Gradient map keyed by tensor identity; index with the tensor itself."""

    def __getitem__(self, key):
        return super().__getitem__(key.uid if isinstance(key, Tensor) else key)

    def get(self, key, default=None):
        return super().get(key.uid if isinstance(key, Tensor) else key, default)

    def __contains__(self, key):
        return super().__contains__(key.uid if isinstance(key, Tensor) else key)

    def accumulate(self, key, g: np.ndarray) -> None:
        k = key.uid if isinstance(key, Tensor) else key
        cur = super().get(k)
        super().__setitem__(k, g if cur is None else cur + g)


# --------------------------------------------------------------------- rng

class Rng:
    """Seeded Philox-4x64 counter-based stream (numpy's ``Philox`` bit generator).

    Identical seeds give identical streams on every platform. ``child(key)``
    derives an independent stream without consuming this one.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & (2**64 - 1)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def child(self, key: int) -> "Rng":
        r = Rng.__new__(Rng)
        r.seed = self.seed
        r._gen = np.random.Generator(np.random.Philox(key=[self.seed, int(key) & (2**64 - 1)]))
        return r

    def normal(self, shape, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std + mean).astype(_dtype)

    def trunc_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) resampled outside ``±bound·std``."""
        z = self._gen.standard_normal(shape)
        bad = np.abs(z) > bound
        while bad.any():
            z[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(z) > bound
        return (z * std).astype(_dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(_dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
