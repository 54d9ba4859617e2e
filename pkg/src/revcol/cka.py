"""Linear centered kernel alignment between feature sets."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .model import RevCol
from .tensor import Tensor

__all__ = ["DegenerateFeatures", "compute_cka", "CkaResult", "cka_by_column", "write_cka_csv"]


class DegenerateFeatures(ValueError):
    """A feature set has no variance across samples, so CKA is undefined."""


def compute_cka(x: np.ndarray, y: np.ndarray) -> float:
    """``||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F)`` after centring every feature."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    if len(x) != len(y):
        raise ValueError(f"sample counts differ: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise ValueError("CKA needs at least 2 samples")
    x = x - x.mean(0)
    y = y - y.mean(0)
    n = len(x)
    if n < max(x.shape[1], y.shape[1]):
        # Gram form: same value, cheaper when features outnumber samples
        kx, ky = x @ x.T, y @ y.T
        cross = float(np.sum(kx * ky))
        nx, ny = np.linalg.norm(kx), np.linalg.norm(ky)
    else:
        cross = float(np.linalg.norm(y.T @ x) ** 2)
        nx, ny = np.linalg.norm(x.T @ x), np.linalg.norm(y.T @ y)
    if nx == 0 or ny == 0:
        raise DegenerateFeatures("a feature set is constant across samples")
    return cross / (nx * ny)


@dataclass
class CkaResult:
    """``image[c-1, l-1]`` and ``label[c-1, l-1]`` for column ``c``, level ``l``."""

    image: np.ndarray
    label: np.ndarray
    samples: int

    def rows(self):
        cols, levels = self.image.shape
        for c in range(cols):
            for l in range(levels):
                yield c + 1, l + 1, float(self.image[c, l]), float(self.label[c, l])


def cka_by_column(model: RevCol, dataset: Dataset, samples: int | None = None, batch_size: int = 64) -> CkaResult:
    """CKA of every (column, level) map against the input pixels and against one-hot labels."""
    n = min(samples or len(dataset), len(dataset))
    images, labels = dataset.images[:n], dataset.labels[:n]
    cols = model.config.columns
    feats: list[list[list[np.ndarray]]] = [[[] for _ in range(4)] for _ in range(cols)]
    for s in range(0, n, batch_size):
        states = model.column_states(Tensor(images[s : s + batch_size]))
        for c, st in enumerate(states):
            for l in range(4):
                feats[c][l].append(st.levels[l].data.reshape(len(st.levels[l].data), -1))
    onehot = np.eye(dataset.classes)[labels]
    img = np.zeros((cols, 4))
    lab = np.zeros((cols, 4))
    for c in range(cols):
        for l in range(4):
            f = np.concatenate(feats[c][l])
            img[c, l] = compute_cka(f, images)
            lab[c, l] = compute_cka(f, onehot)
    return CkaResult(img, lab, n)


def write_cka_csv(result: CkaResult, path: str | Path | None = None) -> str:
    lines = ["column,level,cka_image,cka_label"]
    lines += [f"{c},{l},{a:.10f},{b:.10f}" for c, l, a, b in result.rows()]
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
