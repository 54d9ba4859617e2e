"""Differentiable primitives and reverse-mode gradient replay.

Every primitive computes its forward value with plain numpy and, when the
active tape is recording and an operand requires gradients, records a rule
``rule(grad_out, *saved) -> grads per operand``. Forward arithmetic never
depends on whether the tape records, so re-running a primitive on the same
inputs is bitwise reproducible.

Activations are ``(N, C, H, W)`` row-major throughout. LayerNorm and the
pointwise ``linear`` accept an ``axis`` so channel mixing runs as a strided
reduction instead of a transpose.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, ndtr

from .tensor import Grads, ShapeError, Tensor, current_tape, get_dtype

__all__ = [
    "add", "sub", "mul", "scale", "scale_channels", "reshape", "sum", "mean",
    "conv2d", "layer_norm", "gelu", "linear", "nearest_upsample", "avg_pool2d",
    "global_avg_pool", "softmax_cross_entropy", "sigmoid_bce",
    "grad", "backward", "count_macs",
]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ------------------------------------------------------------- plumbing

_mac_counters: list[list[int]] = []


@contextmanager
def count_macs() -> Iterator[list[int]]:
    """Accumulate multiply-accumulates of conv2d/linear into ``counter[0]``."""
    counter = [0]
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def _macs(n: int) -> None:
    for c in _mac_counters:
        c[0] += int(n)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(get_dtype())
    return Tensor._wrap(arr, False)


def _tape_for(*operands):
    tape = current_tape()
    if tape is None or not tape.recording:
        return None
    if any(isinstance(t, Tensor) and t.requires_grad for t in operands):
        return tape
    return None


def _emit(tape, out: np.ndarray, rule, inputs: Sequence, saved: Sequence = ()) -> Tensor:
    t = Tensor._wrap(out, tape is not None)
    if tape is not None:
        arrays, acts = [], []
        for s in saved:
            if isinstance(s, Tensor):
                arrays.append(s.data)
                if not s.is_param:
                    acts.append(s.data)
            else:
                arrays.append(s)
                if isinstance(s, np.ndarray) and s.ndim > 0:
                    acts.append(s)
        tape.record(rule, inputs, t, arrays, acts)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axes, keepdims=True)
    return g


# ----------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(_tape_for(a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), (a, b))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(_tape_for(a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), (a, b))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def rule(g, av, bv):
        return _unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)

    return _emit(_tape_for(a, b), a.data * b.data, rule, (a, b), (a, b))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(_tape_for(x), x.data * c, lambda g: (g * c,), (x,))


def _channel_shape(ndim: int, axis: int, n: int) -> tuple[int, ...]:
    shape = [1] * ndim
    shape[axis] = n
    return tuple(shape)


def scale_channels(x: Tensor, g: Tensor, axis: int = 1) -> Tensor:
    """``x * g`` with ``g`` of shape ``(C,)`` broadcast along ``axis``."""
    axis = axis % x.ndim
    if g.ndim != 1 or g.shape[0] != x.shape[axis]:
        raise ShapeError(f"channel scale of shape {g.shape} does not match axis {axis} of {x.shape}", axis="C")
    bshape = _channel_shape(x.ndim, axis, g.shape[0])
    others = tuple(i for i in range(x.ndim) if i != axis)

    def rule(gy, xv, gv):
        return gy * gv.reshape(bshape), (gy * xv).sum(others)

    return _emit(_tape_for(x, g), x.data * g.data.reshape(bshape), rule, (x, g), (x, g))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit(_tape_for(x), x.data.reshape(tuple(shape)), lambda g: (g.reshape(old),), (x,))


def sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(_tape_for(x), np.asarray(x.data.sum()),
                 lambda g: (np.broadcast_to(g, shape).copy(),), (x,))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _emit(_tape_for(x), np.asarray(x.data.mean()),
                 lambda g: (np.full(shape, g / n, dtype=x.dtype),), (x,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF (no tanh approximation)."""

    def rule(g, xv):
        return (g * (ndtr(xv) + xv * np.exp(-0.5 * xv * xv) * _INV_SQRT_2PI),)

    xv = x.data
    return _emit(_tape_for(x), xv * ndtr(xv), rule, (x,), (x,))


# ----------------------------------------------------------- convolution

def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def _span(n_out: int, stride: int) -> int:
    return (n_out - 1) * stride + 1


def _cols(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : _span(ho, s) : s, : _span(wo, s) : s]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _dense_fwd(x, w, s, p):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = _out_extent(h, k, s, p), _out_extent(wd, k, s, p)
    out = _cols(_pad(x, p), k, s, ho, wo) @ w.reshape(o, -1).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))


def _dense_bwd(g, x, w, s, p):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = g.shape[2:]
    cols = _cols(_pad(x, p), k, s, ho, wo)
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (g2.T @ cols).reshape(w.shape)
    dcols = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + _span(ho, s) : s, j : j + _span(wo, s) : s] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p : p + h, p : p + wd], dw


def _depthwise_fwd(x, w, s, p):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    ho, wo = _out_extent(h, k, s, p), _out_extent(wd, k, s, p)
    xp = _pad(x, p)
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x, w))
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + _span(ho, s) : s, j : j + _span(wo, s) : s] * w[:, 0, i, j].reshape(1, c, 1, 1)
    return out


def _depthwise_bwd(g, x, w, s, p):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    ho, wo = g.shape[2:]
    xp = _pad(x, p)
    dxp = np.zeros_like(xp, dtype=g.dtype)
    dw = np.zeros_like(w, dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            win = (slice(None), slice(None), slice(i, i + _span(ho, s), s), slice(j, j + _span(wo, s), s))
            dw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[win])
            dxp[win] += g * w[:, 0, i, j].reshape(1, c, 1, 1)
    return dxp[:, :, p : p + h, p : p + wd], dw


def _conv_fwd(x, w, s, p, groups):
    cin, cout = x.shape[1], w.shape[0]
    if groups == 1:
        return _dense_fwd(x, w, s, p)
    if groups == cin == cout:
        return _depthwise_fwd(x, w, s, p)
    ci, co = cin // groups, cout // groups
    return np.concatenate([_dense_fwd(x[:, gi * ci : (gi + 1) * ci], w[gi * co : (gi + 1) * co], s, p)
                           for gi in range(groups)], axis=1)


def _conv_bwd(g, x, w, s, p, groups):
    cin, cout = x.shape[1], w.shape[0]
    if groups == 1:
        return _dense_bwd(g, x, w, s, p)
    if groups == cin == cout:
        return _depthwise_bwd(g, x, w, s, p)
    ci, co = cin // groups, cout // groups
    parts = [_dense_bwd(g[:, gi * co : (gi + 1) * co], x[:, gi * ci : (gi + 1) * ci], w[gi * co : (gi + 1) * co], s, p)
             for gi in range(groups)]
    return np.concatenate([a for a, _ in parts], axis=1), np.concatenate([b for _, b in parts], axis=0)


def conv2d(input: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation on ``(N, Cin, H, W)`` with ``(Cout, Cin/groups, k, k)`` kernels."""
    x, w = input, weight
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be N,C,H,W; got {x.shape}", axis="ndim")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d weight must be Cout,Cin/groups,k,k; got {w.shape}", axis="kernel")
    n, cin, h, wd = x.shape
    cout, cpg, k, _ = w.shape
    if groups < 1 or cin % groups:
        raise ShapeError(f"Cin={cin} is not divisible by groups={groups}", axis="Cin")
    if cpg != cin // groups:
        raise ShapeError(f"weight expects {cpg * groups} input channels, input has {cin}", axis="Cin")
    if cout % groups:
        raise ShapeError(f"Cout={cout} is not divisible by groups={groups}", axis="Cout")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)", axis="Cout")
    ho, wo = _out_extent(h, k, stride, padding), _out_extent(wd, k, stride, padding)
    if ho < 1:
        raise ShapeError(f"output height {ho} < 1 (H={h}, k={k}, stride={stride}, padding={padding})", axis="H")
    if wo < 1:
        raise ShapeError(f"output width {wo} < 1 (W={wd}, k={k}, stride={stride}, padding={padding})", axis="W")
    _macs(n * cout * ho * wo * cpg * k * k)

    out = _conv_fwd(x.data, w.data, stride, padding, groups)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def rule(g, xv, wv):
        dx, dw = _conv_bwd(g, xv, wv, stride, padding, groups)
        return dx, dw, (g.sum((0, 2, 3)) if bias is not None else None)

    return _emit(_tape_for(x, w, bias), out, rule, (x, w, bias), (x, w))


# -------------------------------------------------------- normalization

def layer_norm(input: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-6, axis: int = -1) -> Tensor:
    """Normalize over one axis (the channel axis), then apply ``gain``/``shift``."""
    x = input
    axis = axis % x.ndim
    c = x.shape[axis]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"gain {gain.shape}/shift {shift.shape} do not match C={c} on axis {axis}", axis="C")
    if eps <= 0:
        raise ValueError("eps must be positive")
    bshape = _channel_shape(x.ndim, axis, c)
    others = tuple(i for i in range(x.ndim) if i != axis)

    xv = x.data
    xc = xv - xv.mean(axis, keepdims=True)
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gain.data.reshape(bshape) + shift.data.reshape(bshape)

    def rule(g, xh, rs, gv):
        dxh = g * gv.reshape(bshape)
        dx = rs * (dxh - dxh.mean(axis, keepdims=True) - xh * (dxh * xh).mean(axis, keepdims=True))
        return dx, (g * xh).sum(others), g.sum(others)

    return _emit(_tape_for(x, gain, shift), out, rule, (x, gain, shift), (xhat, rstd, gain))


# ---------------------------------------------------------------- linear

def linear(input: Tensor, weight: Tensor, bias: Tensor | None = None, axis: int = -1) -> Tensor:
    """Affine map ``W x + b`` applied along ``axis`` (trailing axis by default)."""
    x, w = input, weight
    axis = axis % x.ndim
    dout, din = w.shape
    if x.shape[axis] != din:
        raise ShapeError(f"linear expects {din} features on axis {axis}, got {x.shape[axis]}", axis="Din")
    if bias is not None and bias.shape != (dout,):
        raise ShapeError(f"bias shape {bias.shape} != ({dout},)", axis="Dout")
    _macs(x.size // din * dout * din)
    shape = x.shape
    out_shape = shape[:axis] + (dout,) + shape[axis + 1 :]

    if axis == x.ndim - 1:
        out = x.data @ w.data.T
        if bias is not None:
            out = out + bias.data

        def rule(g, xv, wv):
            g2 = g.reshape(-1, dout)
            return g @ wv, g2.T @ xv.reshape(-1, din), (g2.sum(0) if bias is not None else None)
    else:
        pre = int(np.prod(shape[:axis], dtype=np.int64))
        post = int(np.prod(shape[axis + 1 :], dtype=np.int64))
        out = np.matmul(w.data, x.data.reshape(pre, din, post))
        if bias is not None:
            out = out + bias.data.reshape(1, dout, 1)
        out = out.reshape(out_shape)

        def rule(g, xv, wv):
            g3 = g.reshape(pre, dout, post)
            x3 = xv.reshape(pre, din, post)
            dw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(0)
            return (np.matmul(wv.T, g3).reshape(shape), dw,
                    (g3.sum((0, 2)) if bias is not None else None))

    return _emit(_tape_for(x, w, bias), out, rule, (x, w, bias), (x, w))


# ------------------------------------------------------------- resampling

def nearest_upsample(input: Tensor, factor: int) -> Tensor:
    """Replicate every pixel into a ``factor x factor`` block."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    x = input
    if factor == 1:
        return _emit(_tape_for(x), x.data, lambda g: (g,), (x,))
    n, c, h, w = x.shape
    f = factor
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, f, w, f)).reshape(n, c, h * f, w * f)
    return _emit(_tape_for(x), out, lambda g: (g.reshape(n, c, h, f, w, f).sum((3, 5)),), (x,))


def _tree_sum(a: np.ndarray, axis: int) -> np.ndarray:
    # balanced pairwise reduction: sums of equal values stay exact for power-of-two lengths
    a = np.moveaxis(a, axis, -1)
    while a.shape[-1] > 1:
        m = a.shape[-1]
        head = a[..., : m - m % 2 : 2] + a[..., 1 : m - m % 2 : 2]
        a = np.concatenate([head, a[..., m - 1 :]], axis=-1) if m % 2 else head
    return a[..., 0]


def avg_pool2d(input: Tensor, factor: int) -> Tensor:
    """Mean over non-overlapping ``factor x factor`` windows."""
    x = input
    n, c, h, w = x.shape
    f = factor
    if h % f or w % f:
        raise ShapeError(f"spatial extent {h}x{w} not divisible by {f}", axis="H" if h % f else "W")
    blocks = x.data.reshape(n, c, h // f, f, w // f, f)
    out = _tree_sum(_tree_sum(blocks, 5), 3) * (1.0 / (f * f))

    def rule(g):
        return (np.broadcast_to((g / (f * f))[:, :, :, None, :, None], blocks.shape).reshape(n, c, h, w),)

    return _emit(_tape_for(x), out.astype(x.dtype, copy=False), rule, (x,))


def global_avg_pool(input: Tensor) -> Tensor:
    """``(N, C, H, W) -> (N, C)`` spatial mean."""
    x = input
    n, c, h, w = x.shape

    def rule(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy(),)

    return _emit(_tape_for(x), x.data.mean((2, 3)), rule, (x,))


# ------------------------------------------------------------------ losses

def softmax_cross_entropy(logits: Tensor, target, smoothing: float = 0.0) -> Tensor:
    """Batch-mean cross entropy against label-smoothed one-hot targets."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be N,K; got {logits.shape}", axis="ndim")
    n, k = logits.shape
    if k < 2:
        raise ShapeError("need at least two classes", axis="K")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    t = np.asarray(target).astype(np.int64).reshape(-1)
    if t.shape[0] != n:
        raise ShapeError(f"{t.shape[0]} targets for batch of {n}", axis="N")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"target class out of range [0, {k})")

    z = logits.data - logits.data.max(1, keepdims=True)
    lse = np.log(np.exp(z).sum(1, keepdims=True))
    logp = z - lse
    q = np.full((n, k), smoothing / k, dtype=logits.dtype)
    q[np.arange(n), t] += 1.0 - smoothing
    loss = np.asarray(-(q * logp).sum(1).mean(), dtype=logits.dtype)

    def rule(g, lp, tv):
        qq = np.full((n, k), smoothing / k, dtype=lp.dtype)
        qq[np.arange(n), tv] += 1.0 - smoothing
        return ((np.exp(lp) - qq) * (g / n),)

    return _emit(_tape_for(logits), loss, rule, (logits,), (logp, t))


def sigmoid_bce(logits: Tensor, target) -> Tensor:
    """Mean binary cross entropy of ``sigmoid(logits)`` against probabilities ``target``."""
    y = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"target shape {y.shape} != logits shape {logits.shape}", axis="shape")
    if y.size and (y.min() < 0.0 or y.max() > 1.0):
        raise ValueError("BCE targets must lie in [0, 1]")
    z = logits.data
    loss = np.asarray((np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean(), dtype=z.dtype)
    n = z.size

    def rule(g, zv, yv):
        return ((expit(zv) - yv) * (g / n),)

    return _emit(_tape_for(logits), loss, rule, (logits,), (logits, y))


# -------------------------------------------------------------- backward

def grad(tape, roots: Sequence[Tensor], seeds: Sequence[np.ndarray] | None = None,
         wrt: Sequence[Tensor] = (), free: bool = True) -> Grads:
    """Replay ``tape`` in reverse from ``roots`` seeded with ``seeds``.

    Returns gradients of every tensor the tape consumed but did not produce
    (leaves) plus anything listed in ``wrt``. Fan-out accumulates by summation.
    With ``free`` the tape is emptied as it is consumed.
    """
    keep = {t.uid for t in wrt}
    g = Grads()
    if seeds is None:
        seeds = [None] * len(roots)
    for r, s in zip(roots, seeds):
        if r not in tape:
            raise ValueError(f"{r!r} was not produced on this tape")
        g.accumulate(r, np.ones(r.shape, dtype=r.dtype) if s is None else np.asarray(s, dtype=r.dtype))
    produced = set(tape._outputs)
    for entry in reversed(tape.entries):
        gout = dict.get(g, entry.output) if entry.output in keep else dict.pop(g, entry.output, None)
        if gout is not None:
            for uid, gi in zip(entry.inputs, entry.rule(gout, *entry.saved)):
                if uid is not None and gi is not None:
                    g.accumulate(uid, gi)
        if free:
            tape._free(entry)
    if free:
        tape.clear()
    for uid in list(g):
        if uid in produced and uid not in keep:
            del g[uid]
    return g


def backward(tape, loss: Tensor, wrt: Sequence[Tensor] = (), free: bool = True) -> Grads:
    """Gradients of a recorded scalar ``loss`` with respect to every leaf."""
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}", axis="shape")
    return grad(tape, [loss], None, wrt=wrt, free=free)
