"""Datasets: IDX files, seeded synthetic generators, batching and prefetch."""

from __future__ import annotations

import queue
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .tensor import Rng, get_dtype

__all__ = [
    "Dataset",
    "FormatError",
    "IDX_IMAGES",
    "IDX_LABELS",
    "load_idx",
    "pad_to_multiple",
    "synth_dataset",
    "linear_probe",
    "batches",
    "Prefetcher",
]

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class FormatError(OSError):
    """A file does not follow its declared binary layout."""


@dataclass
class Dataset:
    images: np.ndarray  # N, 3, H, W in [0, 1]
    labels: np.ndarray  # N, int64
    classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be N,3,H,W; got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.classes < 2:
            raise ValueError("a dataset needs at least 2 classes")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.classes)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))


# --------------------------------------------------------------------- IDX

def _read_idx(path: str | Path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: wrong magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = int(np.prod(dims))
    if len(raw) - head < need:
        raise FormatError(f"{path}: truncated payload ({len(raw) - head} of {need} bytes)")
    return np.frombuffer(raw, np.uint8, need, head).reshape(dims)


def pad_to_multiple(images: np.ndarray, multiple: int = 32) -> np.ndarray:
    """Zero-pad the last two axes up to a multiple, keeping content centred."""
    h, w = images.shape[-2:]
    ph = -h % multiple
    pw = -w % multiple
    if ph == 0 and pw == 0:
        return images
    pads = [(0, 0)] * (images.ndim - 2) + [(ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)]
    return np.pad(images, pads)


def load_idx(images_path: str | Path, labels_path: str | Path, classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair (u8 images N x H x W, u8 labels N)."""
    imgs = _read_idx(images_path, IDX_IMAGES)
    labels = _read_idx(labels_path, IDX_LABELS)
    if len(imgs) != len(labels):
        raise FormatError(f"count mismatch: {len(imgs)} images vs {len(labels)} labels")
    x = imgs.astype(get_dtype()) / 255.0
    x = np.repeat(x[:, None], 3, axis=1)
    x = pad_to_multiple(x, 32)
    y = labels.astype(np.int64)
    k = classes if classes is not None else max(int(y.max(initial=0)) + 1, 2)
    return Dataset(np.ascontiguousarray(x), y, k)


# --------------------------------------------------------------- synthetic

def synth_dataset(kind: str, classes: int = 4, samples: int = 512, size: int | tuple[int, int] = 32,
                  seed: int = 0) -> Dataset:
    """Deterministic synthetic image sets.

    ``gaussian_blobs``: each class is a fixed random image plus small pixel
    noise, so raw pixels separate linearly. ``striped_textures``: the class is
    the stripe orientation; phase, frequency and colour are random per image,
    so the class mean carries almost nothing and spatial filtering is needed.
    """
    if classes < 2:
        raise ValueError("classes must be >= 2")
    h, w = (size, size) if isinstance(size, int) else size
    rng = Rng(seed)
    labels = np.arange(samples) % classes
    labels = labels[rng.child(0).permutation(samples)].astype(np.int64)
    if kind == "gaussian_blobs":
        means = rng.child(1).uniform((classes, 3, h, w), 0.2, 0.8)
        noise = rng.child(2).normal((samples, 3, h, w), std=0.1)
        x = np.clip(means[labels] + noise, 0.0, 1.0)
    elif kind == "striped_textures":
        r = rng.child(3)
        theta = np.pi * labels / classes
        freq = r.uniform((samples,), 1 / 10, 1 / 5)
        phase = r.uniform((samples,), 0.0, 2 * np.pi)
        colour = r.uniform((samples, 3), 0.4, 1.0)
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
        x = colour[:, :, None, None] * wave[:, None]
        x = np.clip(x + r.normal(x.shape, std=0.05), 0.0, 1.0)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected gaussian_blobs or striped_textures")
    return Dataset(np.ascontiguousarray(x, dtype=get_dtype()), labels, classes)


def linear_probe(train: Dataset, test: Dataset | None = None, ridge: float = 1e-3) -> tuple[float, float | None]:
    """Ridge-regression classifier on flattened raw pixels; returns (train acc, test acc)."""
    x = train.images.reshape(len(train), -1).astype(np.float64)
    mu = x.mean(0)
    x = np.hstack([x - mu, np.ones((len(x), 1))])
    y = np.eye(train.classes)[train.labels]
    # dual form: d is usually far larger than n
    a = np.linalg.solve(x @ x.T + ridge * np.eye(len(x)), y)
    wt = x.T @ a
    acc = float(np.mean((x @ wt).argmax(1) == train.labels))
    if test is None:
        return acc, None
    xt = test.images.reshape(len(test), -1).astype(np.float64) - mu
    xt = np.hstack([xt, np.ones((len(xt), 1))])
    return acc, float(np.mean((xt @ wt).argmax(1) == test.labels))


# ---------------------------------------------------------------- batching

def batches(dataset: Dataset, batch_size: int, seed: int = 0, epoch: int = 0,
            shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Mini-batches in an order fixed by ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = Rng(seed).child(1000 + epoch).permutation(n) if shuffle else np.arange(n)
    for s in range(0, n, batch_size):
        idx = order[s : s + batch_size]
        yield np.ascontiguousarray(dataset.images[idx]), dataset.labels[idx]


_DONE = object()


class Prefetcher:
    """Produce items on a background thread through a bounded queue."""

    def __init__(self, items: Iterable, depth: int = 2):
        if depth < 1:
            raise ValueError("queue depth must be >= 1")
        self._q: queue.Queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(iter(items),), daemon=True)
        self._thread.start()

    def _run(self, it: Iterator) -> None:
        try:
            for item in it:
                while not self._stop.is_set():
                    try:
                        self._q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._stop.is_set():
                    return
            self._q.put(_DONE)
        except BaseException as e:  # handed to the consumer
            self._q.put(e)

    def __iter__(self):
        while True:
            item = self._q.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item

    def close(self) -> None:
        self._stop.set()
        while self._thread.is_alive():
            try:
                self._q.get_nowait()
            except queue.Empty:
                self._thread.join(0.05)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
