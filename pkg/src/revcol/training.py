"""Intermediate supervision, the training step, and desk-scale training loops."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .data import Dataset, Prefetcher, batches
from .model import RevCol
from .optim import AdamW
from .reversible import reversible_backward
from .tensor import Grads, Tape, Tensor, no_tape

__all__ = [
    "DEFAULT_ALPHA",
    "DEFAULT_BETA",
    "NonFiniteLoss",
    "SupervisionSchedule",
    "TrainConfig",
    "place_heads",
    "default_weights",
    "recon_target",
    "compound_loss",
    "loss_and_grads",
    "cosine_lr",
    "train_step",
    "format_metrics",
    "fit",
    "evaluate",
    "dataset_loss",
    "make_optimizer",
]

DEFAULT_ALPHA = (3.0, 2.0, 1.0, 0.0)
DEFAULT_BETA = (0.18, 0.35, 0.53, 1.0)


class NonFiniteLoss(ArithmeticError):
    """The loss or one of its terms is not finite; ``term`` names it (e.g. ``"bce_2"``)."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term} = {value}")
        self.term = term
        self.value = value


def place_heads(columns: int, n: int) -> list[int]:
    """Evenly spaced side-head columns ``round(COL*j/(n+1))`` for ``j = 1..n`` (halves round up)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n > columns:
        raise ValueError(f"cannot place {n} heads on {columns} columns")
    return [int(math.floor(columns * j / (n + 1) + 0.5)) for j in range(1, n + 1)]


def default_weights(n: int) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """(alpha, beta) for ``n`` side heads plus the final classifier.

    ``n = 3`` uses the reference weights. Other ``n`` interpolate linearly
    between the same end points: alpha from 3 down, beta up towards 0.7, and
    the final term is pure classification.
    """
    if n == 3:
        return DEFAULT_ALPHA, DEFAULT_BETA
    alpha = tuple(3.0 * (n + 1 - i) / n for i in range(1, n + 1)) + (0.0,)
    beta = tuple(0.7 * i / (n + 1) for i in range(1, n + 1)) + (1.0,)
    return alpha, beta


@dataclass(frozen=True)
class SupervisionSchedule:
    columns: int
    head_columns: tuple[int, ...]
    alpha: tuple[float, ...]
    beta: tuple[float, ...]

    @property
    def n(self) -> int:
        return len(self.head_columns)

    @classmethod
    def default(cls, columns: int, n: int | None = None) -> "SupervisionSchedule":
        if n is None:
            n = min(3, columns - 1)
        a, b = default_weights(n)
        return cls(columns, tuple(place_heads(columns, n)), a, b).validate()

    def validate(self) -> "SupervisionSchedule":
        n = self.n
        if len(self.alpha) != n + 1 or len(self.beta) != n + 1:
            raise ValueError(f"{n} heads need {n + 1} alpha and beta weights, "
                             f"got {len(self.alpha)} and {len(self.beta)}")
        for c in self.head_columns:
            if not 1 <= c <= self.columns:
                raise ValueError(f"head column {c} outside [1, {self.columns}]")
        if any(a < 0 for a in self.alpha) or any(b < 0 for b in self.beta):
            raise ValueError("loss weights must be non-negative")
        if any(x < y for x, y in zip(self.alpha, self.alpha[1:])):
            raise ValueError(f"alpha must be non-increasing, got {self.alpha}")
        if any(x > y for x, y in zip(self.beta, self.beta[1:])):
            raise ValueError(f"beta must be non-decreasing, got {self.beta}")
        return self

    def terms(self) -> list[tuple[int, float, float]]:
        """(column, alpha, beta) per loss term, final classifier last."""
        cols = list(self.head_columns) + [self.columns]
        return list(zip(cols, self.alpha, self.beta))


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 32
    lr: float = 2e-3
    warmup_steps: int = 0
    total_steps: int | None = None
    weight_decay: float = 0.05
    smoothing: float = 0.0
    seed: int = 0
    precision: str = "f64"
    mode: str = "reversible"
    clip: float = 0.0
    queue_depth: int = 2
    time_limit: float | None = None
    log_every: int = 10

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0 or self.weight_decay < 0 or self.clip < 0:
            raise ValueError("lr, weight_decay and clip must be non-negative")
        if self.warmup_steps < 0 or (self.total_steps is not None and self.total_steps < 1):
            raise ValueError("warmup_steps must be >= 0 and total_steps >= 1")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError(f"smoothing must lie in [0, 1), got {self.smoothing}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.mode not in ("store_all", "reversible"):
            raise ValueError(f"mode must be store_all or reversible, got {self.mode!r}")
        if self.queue_depth < 1 or self.log_every < 1:
            raise ValueError("queue_depth and log_every must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------- losses

def recon_target(images: np.ndarray) -> np.ndarray:
    """Per-image min-max normalisation to [0, 1]; flat images are clipped instead."""
    lo = images.min(axis=(1, 2, 3), keepdims=True)
    hi = images.max(axis=(1, 2, 3), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (images - lo) / safe, np.clip(images, 0.0, 1.0))


def compound_loss(heads: dict, target: np.ndarray, labels: np.ndarray, schedule: SupervisionSchedule,
                  smoothing: float = 0.0) -> tuple[Tensor, dict[str, list[float]]]:
    """``sum_i alpha_i*BCE_i + beta_i*CE_i`` over the schedule's terms.

    ``heads[c] = (reconstruction logits or None, class logits)``. Returns the
    scalar loss and a per-term breakdown ``{"bce": [...], "ce": [...]}``;
    a term without a decoder reports BCE as 0.
    """
    terms = schedule.terms()
    missing = [c for c, _, _ in terms if c not in heads]
    if missing:
        raise ValueError(f"schedule has {len(terms)} terms but no head output for columns {missing}")
    total = None
    br: dict[str, list[float]] = {"bce": [], "ce": []}
    for i, (col, a, b) in enumerate(terms, 1):
        recon, logits = heads[col]
        piece = None
        if a != 0:
            if recon is None:
                raise ValueError(f"term {i} weights reconstruction but column {col} has no decoder")
            bce = ops.sigmoid_bce(recon, target)
            br["bce"].append(_finite(bce, f"bce_{i}"))
            piece = ops.scale(bce, a)
        else:
            br["bce"].append(0.0 if recon is None else _finite(ops.sigmoid_bce(recon, target), f"bce_{i}"))
        ce = ops.softmax_cross_entropy(logits, labels, smoothing)
        br["ce"].append(_finite(ce, f"ce_{i}"))
        if b != 0 or piece is None:
            w = ops.scale(ce, b)
            piece = w if piece is None else piece + w
        total = piece if total is None else total + piece
    _finite(total, "loss")
    return total, br


def _finite(t: Tensor, term: str) -> float:
    v = float(t.data)
    if not math.isfinite(v):
        raise NonFiniteLoss(term, v)
    return v


def _head_groups(schedule: SupervisionSchedule) -> dict[int, list[tuple[int, float, float]]]:
    groups: dict[int, list] = {}
    for i, (c, a, b) in enumerate(schedule.terms(), 1):
        groups.setdefault(c, []).append((i, a, b))
    return groups


def loss_and_grads(model: RevCol, images: np.ndarray, labels: np.ndarray, schedule: SupervisionSchedule,
                   mode: str = "reversible", smoothing: float = 0.0):
    """Forward, compound loss and parameter gradients.

    Returns ``(loss, breakdown, grads, logits)``. In reversible mode each head
    is differentiated on its own short tape; the resulting gradients at the
    head columns feed :func:`reversible_backward` as taps, and the entry
    gradient finishes on the stem's tape.
    """
    x = Tensor(images)
    target = recon_target(images)
    if mode == "store_all":
        with Tape() as tape:
            res = model.forward(x, "store_all")
            loss, br = compound_loss(res.heads, target, labels, schedule, smoothing)
        grads = ops.backward(tape, loss)
        return float(loss.data), br, grads, res.logits.data
    if mode != "reversible":
        raise ValueError(f"mode must be store_all or reversible, got {mode!r}")

    cols = model.config.columns
    with Tape() as tape:
        res = model.forward(x, "reversible")
    try:
        loss, br = compound_loss(res.heads, target, labels, schedule, smoothing)
        grads = Grads()
        tap_grads: dict[int, list] = {}
        for col, items in _head_groups(schedule).items():
            src = res.taps[col] if col != cols else res.last[4]
            leaf = src.detach(requires_grad=True)
            with Tape() as ht:
                recon, logits = model.head_forward(col, leaf)
                part = _weighted(recon, logits, target, labels, items, smoothing)
            hg = ops.backward(ht, part)
            for uid, g in hg.items():
                if uid != leaf.uid:
                    grads.accumulate(uid, g)
            tap_grads[col] = [None, None, None, hg[leaf]]
        upstream = tap_grads.pop(cols, None) or [None, None, None, np.zeros_like(res.last[4].data)]
        pg, g_entry = reversible_backward(res.last, upstream, res.stem, model, cols, taps=tap_grads,
                                          last_hold=res.last_hold)
        for uid, g in pg.items():
            grads.accumulate(uid, g)
        for uid, g in ops.grad(tape, [res.stem], [g_entry]).items():
            grads.accumulate(uid, g)
    finally:
        res.retained.release()
        res.last_hold.release()
    return float(loss.data), br, grads, res.logits.data


def _weighted(recon, logits, target, labels, items, smoothing) -> Tensor:
    # same arithmetic as compound_loss restricted to one column's terms
    total = None
    for _, a, b in items:
        piece = None
        if a != 0:
            piece = ops.scale(ops.sigmoid_bce(recon, target), a)
        if b != 0 or piece is None:
            w = ops.scale(ops.softmax_cross_entropy(logits, labels, smoothing), b)
            piece = w if piece is None else piece + w
        total = piece if total is None else total + piece
    return total


# ------------------------------------------------------------- optimization

def cosine_lr(step: int, warmup: int, total: int, peak: float) -> float:
    """Linear warm-up from 0 to ``peak`` over ``warmup`` steps, then cosine decay to 0 at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return peak * step / warmup
    if total == warmup:
        return peak
    t = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * t))


def make_optimizer(model: RevCol, cfg: TrainConfig) -> AdamW:
    return AdamW(model.parameters(), weight_decay=cfg.weight_decay)


def train_step(model: RevCol, batch: tuple[np.ndarray, np.ndarray], opt: AdamW, cfg: TrainConfig,
               schedule: SupervisionSchedule, step: int = 0, total: int | None = None) -> dict:
    """One optimisation step; returns metrics."""
    images, labels = batch
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"batch has {images.shape[0]} images but {labels.shape[0]} labels")
    total = total or cfg.total_steps or max(step, 1)
    lr = cosine_lr(min(step, total), cfg.warmup_steps, total, cfg.lr)
    loss, br, grads, logits = loss_and_grads(model, images, labels, schedule, cfg.mode, cfg.smoothing)
    gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in (grads.get(p) for p in opt.params) if g is not None))
    if cfg.clip > 0 and gnorm > cfg.clip:
        s = cfg.clip / gnorm
        grads = Grads({k: v * s for k, v in grads.items()})
    opt.step(grads, lr)
    for g in model.gammas():
        g.clamp()
    acc = float(np.mean(logits.argmax(1) == labels))
    return {"step": step, "lr": lr, "loss": loss, "bce": br["bce"], "ce": br["ce"], "gnorm": gnorm, "acc": acc}


def format_metrics(m: dict) -> str:
    bce = ",".join(f"{v:.6g}" for v in m["bce"])
    ce = ",".join(f"{v:.6g}" for v in m["ce"])
    return f"step={m['step']} lr={m['lr']:.6g} loss={m['loss']:.6g} bce_i={bce} ce_i={ce} gnorm={m['gnorm']:.6g}"


def evaluate(model: RevCol, dataset: Dataset, batch_size: int = 64) -> tuple[float, float]:
    """(accuracy, mean final-classifier cross-entropy)."""
    correct, loss_sum = 0, 0.0
    with no_tape():
        for images, labels in batches(dataset, batch_size, shuffle=False):
            logits = model.forward(Tensor(images), "store_all", heads=False).logits
            correct += int(np.sum(logits.data.argmax(1) == labels))
            loss_sum += float(ops.softmax_cross_entropy(logits, labels).data) * len(labels)
    return correct / len(dataset), loss_sum / len(dataset)


def dataset_loss(model: RevCol, dataset: Dataset, schedule: SupervisionSchedule, batch_size: int = 64,
                 smoothing: float = 0.0) -> float:
    """Compound loss over a whole dataset (size-weighted mean of batch losses)."""
    total = 0.0
    with no_tape():
        for images, labels in batches(dataset, batch_size, shuffle=False):
            res = model.forward(Tensor(images), "store_all")
            loss, _ = compound_loss(res.heads, recon_target(images), labels, schedule, smoothing)
            total += float(loss.data) * len(labels)
    return total / len(dataset)


@dataclass
class History:
    records: list[dict] = field(default_factory=list)
    window_losses: list[float] = field(default_factory=list)
    monitor_losses: list[float] = field(default_factory=list)
    stopped_early: bool = False
    seconds: float = 0.0


def fit(model: RevCol, dataset: Dataset, cfg: TrainConfig, schedule: SupervisionSchedule,
        log: Callable[[str], None] | None = None, opt: AdamW | None = None,
        monitor: Dataset | None = None) -> tuple[AdamW, History]:
    """Train for ``cfg.epochs`` (or until ``cfg.time_limit`` seconds).

    Batches come from a prefetch thread. ``History.window_losses`` holds the
    mean minibatch loss of each block of ``cfg.log_every`` steps; with a
    ``monitor`` set, ``History.monitor_losses`` holds its full compound loss
    before training and after every block.
    """
    cfg.validate()
    opt = opt or make_optimizer(model, cfg)
    per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = cfg.total_steps or cfg.epochs * per_epoch
    hist = History()
    start = time.perf_counter()
    step, window = 0, []
    if monitor is not None:
        hist.monitor_losses.append(dataset_loss(model, monitor, schedule, smoothing=cfg.smoothing))
    for epoch in range(cfg.epochs):
        with Prefetcher(batches(dataset, cfg.batch_size, cfg.seed, epoch), cfg.queue_depth) as pf:
            for batch in pf:
                if step >= total:
                    break
                m = train_step(model, batch, opt, cfg, schedule, step, total)
                hist.records.append(m)
                window.append(m["loss"])
                step += 1
                if len(window) == cfg.log_every:
                    hist.window_losses.append(float(np.mean(window)))
                    window = []
                    if monitor is not None:
                        hist.monitor_losses.append(dataset_loss(model, monitor, schedule, smoothing=cfg.smoothing))
                    if log:
                        log(format_metrics(m))
                if cfg.time_limit is not None and time.perf_counter() - start > cfg.time_limit:
                    hist.stopped_early = True
                    break
        if hist.stopped_early or step >= total:
            break
    if window:
        hist.window_losses.append(float(np.mean(window)))
        if monitor is not None:
            hist.monitor_losses.append(dataset_loss(model, monitor, schedule, smoothing=cfg.smoothing))
    hist.seconds = time.perf_counter() - start
    return opt, hist
