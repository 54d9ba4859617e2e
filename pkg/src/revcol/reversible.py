"""m-order reversible recursion and reconstruction-based backpropagation.

The general unit computes ``x_t = F_t(x_{t-1}, ..., x_{t-m+1}) + gamma * x_{t-m}``
and inverts as ``x_{t-m} = gamma^-1 * (x_t - F_t(...))``. Grouping every ``m``
consecutive maps gives a column. Between columns the simplified wiring feeds
``F_t`` only the lower level of the current column (``x_{t-1}``) and the next
level up of the previous column (``x_{t-m+1}``).

Inverting a column runs from the top level down: level ``m`` has no
previous-column input, and level ``l`` needs level ``l+1`` of the previous
column, which the step before has just rebuilt.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from . import ops
from .tensor import Grads, Parameter, Retained, ShapeError, Tape, Tensor, no_tape

__all__ = [
    "GAMMA_FLOOR",
    "GammaScale",
    "ColumnState",
    "NonlinearBank",
    "ReconstructionError",
    "revnet_step",
    "reversible_forward_step",
    "reversible_inverse_step",
    "run_sequence",
    "invert_sequence",
    "simplified_column_step",
    "reconstruct_column",
    "forward_columns",
    "reversible_backward",
]

GAMMA_FLOOR = 1e-3


class ReconstructionError(ArithmeticError):
    """Inversion is unsafe (gamma under its floor) or produced non-finite values."""


class GammaScale:
    """Learnable per-channel reversible scale with a magnitude floor.

    Signs are preserved when clamping; an exact zero goes to ``+floor``.
    """

    def __init__(self, channels: int, floor: float = GAMMA_FLOOR, axis: int = 1, name: str | None = None):
        self.param = Parameter(np.ones(channels), name=name)
        self.floor = float(floor)
        self.axis = axis
        self.clamp()

    @property
    def values(self) -> np.ndarray:
        return self.param.data

    def clamp(self) -> None:
        v = self.param.data
        if np.all(np.abs(v) >= self.floor):
            return
        sign = np.where(v < 0, -1.0, 1.0)
        self.param.assign(np.where(np.abs(v) < self.floor, sign * self.floor, v))

    def check(self) -> None:
        if not np.all(np.abs(self.param.data) >= self.floor):
            bad = float(np.abs(self.param.data).min())
            raise ReconstructionError(f"|gamma| = {bad:g} is below the floor {self.floor:g}")

    def apply(self, x: Tensor) -> Tensor:
        return ops.scale_channels(x, self.param, axis=self.axis)

    def unapply(self, y: np.ndarray) -> np.ndarray:
        """Multiply by the reciprocal scale (computed once per call)."""
        self.check()
        inv = 1.0 / self.param.data
        shape = [1] * y.ndim
        shape[self.axis % y.ndim] = inv.shape[0]
        return y * inv.reshape(shape)


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: {a.shape} vs {b.shape}", axis="shape")


# -------------------------------------------------------------- single steps

def revnet_step(x_prev1: Tensor, x_other: Tensor, F: Callable[[Tensor], Tensor],
                gamma: GammaScale, direction: str = "forward") -> Tensor:
    """Two-term unit.

    ``direction="forward"``: ``x_other`` is ``x_{t-2}``; returns
    ``F(x_{t-1}) + gamma*x_{t-2}``. ``direction="inverse"``: ``x_other`` is
    ``x_t``; returns ``x_{t-2}``.
    """
    if direction == "forward":
        f = F(x_prev1)
        _check_same(f, x_other, "F output vs x_{t-2}")
        gamma.check()
        return f + gamma.apply(x_other)
    if direction == "inverse":
        return reversible_inverse_step(x_other, [x_prev1], F, gamma)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def reversible_forward_step(inputs: Sequence[Tensor | None], x_t_minus_m: Tensor,
                            F_t: Callable[..., Tensor], gamma: GammaScale) -> Tensor:
    """``x_t = F_t(*inputs) + gamma * x_{t-m}``; ``inputs`` in the order ``x_{t-1}, x_{t-2}, ...``."""
    for i, x in enumerate(inputs):
        if x is None:
            raise ValueError(f"missing wired input x_(t-{i + 1})")
    f = F_t(*inputs)
    _check_same(f, x_t_minus_m, "F output vs x_{t-m}")
    gamma.check()
    return f + gamma.apply(x_t_minus_m)


def reversible_inverse_step(x_t: Tensor, F_inputs: Sequence[Tensor], F_t: Callable[..., Tensor],
                            gamma: GammaScale) -> Tensor:
    """Recover ``x_{t-m} = gamma^-1 * (x_t - F_t(*F_inputs))`` without recording."""
    gamma.check()
    with no_tape():
        f = F_t(*F_inputs)
    _check_same(f, x_t, "F output vs x_t")
    out = gamma.unapply(x_t.data - f.data)
    if not np.all(np.isfinite(out)):
        raise ReconstructionError("reconstruction produced non-finite values")
    return Tensor._wrap(out, False)


def run_sequence(initial: Sequence[Tensor], fns: Sequence[Callable[..., Tensor]],
                 gammas: Sequence[GammaScale]) -> list[Tensor]:
    """Full-arity recursion from the first group ``x_1..x_m``.

    ``fns[j]`` and ``gammas[j]`` produce ``x_{m+1+j}``. Returns the whole
    materialized sequence.
    """
    m = len(initial)
    if m < 2:
        raise ValueError("order m must be >= 2")
    xs = list(initial)
    for f, g in zip(fns, gammas):
        t = len(xs)
        xs.append(reversible_forward_step([xs[t - k] for k in range(1, m)], xs[t - m], f, g))
    return xs


def invert_sequence(last: Sequence[Tensor], fns: Sequence[Callable[..., Tensor]],
                    gammas: Sequence[GammaScale]) -> list[Tensor]:
    """Recover the first group from the last ``m`` maps of :func:`run_sequence`."""
    m = len(last)
    xs = list(last)  # xs[0] is the oldest known map
    for f, g in zip(reversed(fns), reversed(gammas)):
        # xs[-1] = x_t, inputs x_{t-1}..x_{t-m+1} are xs[-2]..xs[0]
        prev = reversible_inverse_step(xs[-1], [xs[-1 - k] for k in range(1, m)], f, g)
        xs = [prev] + xs[:-1]
    return xs


# ------------------------------------------------------------------ columns

@dataclass
class ColumnState:
    """The ``m`` level maps of one column, level 1 first."""

    levels: list[Tensor]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> Tensor:
        """1-based level access."""
        return self.levels[level - 1]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [x.shape for x in self.levels]

    def arrays(self) -> list[np.ndarray]:
        return [x.data for x in self.levels]


class NonlinearBank(Protocol):
    """Per-(column, level) nonlinearities and reversible scales.

    ``f(column, level, low, high)``: ``low`` is ``x_{t-1}`` (the lower level of
    the same column, or the column entry for level 1); ``high`` is level
    ``level+1`` of the previous column and is ``None`` for the top level and for
    column 1. ``gamma(column, level)`` is ``None`` for column 1.
    """

    order: int

    def f(self, column: int, level: int, low: Tensor, high: Tensor | None) -> Tensor: ...

    def gamma(self, column: int, level: int) -> GammaScale | None: ...


def simplified_column_step(prev: ColumnState | None, entry: Tensor, bank: NonlinearBank,
                           column: int) -> ColumnState:
    """Compute column ``column`` from the previous column (``None`` for column 1)."""
    m = bank.order
    if prev is not None and len(prev) != m:
        raise ShapeError(f"previous column has {len(prev)} levels, expected {m}", axis="levels")
    out: list[Tensor] = []
    low = entry
    for level in range(1, m + 1):
        high = prev[level + 1] if prev is not None and level < m else None
        x = bank.f(column, level, low, high)
        if prev is not None:
            _check_same(x, prev[level], f"column {column} level {level}")
            x = x + bank.gamma(column, level).apply(prev[level])
        out.append(x)
        low = x
    return ColumnState(out)


def reconstruct_column(next_col: ColumnState, entry: Tensor, bank: NonlinearBank, column: int) -> ColumnState:
    """Invert :func:`simplified_column_step`; ``next_col`` is column ``column`` (>= 2)."""
    if column < 2:
        raise ValueError("column 1 has no predecessor to reconstruct")
    m = bank.order
    prev: list[Tensor | None] = [None] * m
    with no_tape():
        for level in range(m, 0, -1):
            low = next_col[level - 1] if level > 1 else entry
            high = prev[level] if level < m else None  # prev[level] holds level+1
            gamma = bank.gamma(column, level)
            gamma.check()
            f = bank.f(column, level, low, high)
            x = gamma.unapply(next_col[level].data - f.data)
            if not np.all(np.isfinite(x)):
                raise ReconstructionError(f"non-finite reconstruction at column {column - 1}, level {level}")
            prev[level - 1] = Tensor._wrap(x, False)
    return ColumnState(prev)


def forward_columns(entry: Tensor, bank: NonlinearBank, columns: int,
                    on_column: Callable[[int, ColumnState], None] | None = None) -> ColumnState:
    """Run columns ``1..columns``; only the last state is kept by default."""
    state = None
    for i in range(1, columns + 1):
        state = simplified_column_step(state, entry, bank, i)
        if on_column is not None:
            on_column(i, state)
    return state


def reversible_backward(last_column: ColumnState, upstream: Sequence[np.ndarray | None], entry: Tensor,
                        bank: NonlinearBank, columns: int,
                        taps: Mapping[int, Sequence[np.ndarray | None]] | None = None,
                        last_hold: Retained | None = None) -> tuple[Grads, np.ndarray]:
    """Backpropagate through all columns while holding at most two of them.

    ``upstream`` gives d(loss)/d(level) for the last column (``None`` for no
    gradient). ``taps`` adds gradients arriving from side heads at other
    columns. For ``i = columns..1`` the previous column is rebuilt from column
    ``i``, column ``i`` is re-run on a fresh tape from the rebuilt state and
    backpropagated, and the gradient of the rebuilt state (gamma path plus F
    paths) becomes the upstream of column ``i-1``.

    A column's own retention is dropped as soon as its predecessor has been
    rebuilt; ``last_hold`` lets the caller hand over the retention of
    ``last_column``.

    Returns parameter gradients keyed by tensor identity and the gradient of
    the shared column entry.
    """
    m = bank.order
    if len(upstream) != m or len(last_column) != m:
        raise ShapeError(f"expected {m} levels of state and upstream gradient", axis="levels")
    taps = dict(taps or {})
    params = Grads()
    g_entry = np.zeros_like(entry.data)
    cur = last_column
    g_cur = list(upstream)
    hold_cur = last_hold if last_hold is not None else Retained(cur.arrays())
    for i in range(columns, 0, -1):
        extra = taps.get(i)
        if extra is not None:
            g_cur = [_merge(a, b) for a, b in zip(g_cur, extra)]
        if i > 1:
            prev = reconstruct_column(cur, entry, bank, i)
            hold_prev = Retained(prev.arrays())
            prev_leaf = ColumnState([x.detach(requires_grad=True) for x in prev.levels])
        else:
            prev, hold_prev, prev_leaf = None, None, None
        hold_cur.release()
        del cur
        entry_leaf = entry.detach(requires_grad=True)
        with Tape() as tape:
            out = simplified_column_step(prev_leaf, entry_leaf, bank, i)
        pairs = [(o, g) for o, g in zip(out.levels, g_cur) if g is not None]
        # an identity F (no blocks at level 1) can hand back the entry leaf itself
        passthrough = [(o, g) for o, g in pairs if o not in tape]
        roots = [o for o, g in pairs if o in tape]
        seeds = [g for o, g in pairs if o in tape]
        grads = ops.grad(tape, roots, seeds) if roots else Grads()
        for o, g in passthrough:
            grads.accumulate(o, g)
        del out, tape
        leaf_ids = {entry_leaf.uid}
        if prev_leaf is not None:
            leaf_ids.update(x.uid for x in prev_leaf.levels)
        for uid, g in grads.items():
            if uid not in leaf_ids:
                params.accumulate(uid, g)
        ge = grads.get(entry_leaf)
        if ge is not None:
            g_entry = g_entry + ge
        if prev_leaf is None:
            break
        g_cur = [grads.get(x) for x in prev_leaf.levels]
        cur, hold_cur = prev, hold_prev
    return params, g_entry


def _merge(a, b):
    if a is None:
        return b
    if b is None:
        return a
    if a.shape != b.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {b.shape}", axis="shape")
    return a + b
