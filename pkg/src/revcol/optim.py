"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Grads, Parameter, ShapeError

__all__ = ["adamw_step", "AdamW"]


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
               moments: Sequence[tuple[np.ndarray, np.ndarray]], lr: float,
               betas: tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.05,
               step: int = 1, eps: float = 1e-8, decay: Sequence[bool] | None = None):
    """One AdamW update; returns ``(new_params, new_moments)``.

    ``step`` is the 1-based count used for bias correction. Decay is applied
    to the parameter before the adaptive step (``p <- p - lr*wd*p``), and only
    to entries whose ``decay`` flag is true.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if not (len(params) == len(grads) == len(moments)):
        raise ShapeError("params, grads and moments differ in length", axis="count")
    b1, b2 = betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_p, new_m = [], []
    for i, (p, g, (m, v)) in enumerate(zip(params, grads, moments)):
        if g.shape != p.shape or m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"entry {i}: param {p.shape}, grad {g.shape}, moments {m.shape}/{v.shape}", axis=i)
        wd = weight_decay if decay is None or decay[i] else 0.0
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        p = p * (1.0 - lr * wd) - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p.append(p)
        new_m.append((m, v))
    return new_p, new_m


def _decays(p: Parameter) -> bool:
    # matrices and kernels decay; biases, norm affines, layer and reversible scales do not
    return p.ndim >= 2


@dataclass
class AdamW:
    """Stateful wrapper applying :func:`adamw_step` to a parameter list."""

    params: list[Parameter]
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.05
    eps: float = 1e-8
    step_count: int = 0
    moments: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if not self.moments:
            self.moments = [(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params]

    def step(self, grads: Grads, lr: float) -> None:
        self.step_count += 1
        gs = [grads.get(p) if grads.get(p) is not None else np.zeros_like(p.data) for p in self.params]
        new_p, self.moments = adamw_step([p.data for p in self.params], gs, self.moments, lr,
                                         self.betas, self.weight_decay, self.step_count, self.eps,
                                         [_decays(p) for p in self.params])
        for p, v in zip(self.params, new_p):
            p.assign(v)
