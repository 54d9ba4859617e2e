"""Reversible column network built on the reversible engine.

Every column has four levels. Level ``l`` of column ``i`` computes::

    fused = down(level l-1 of column i) + up(level l+1 of column i-1)
    x     = body(fused) + gamma * (level l of column i-1)

Level 1 uses the stem output as its lower input (no down-sampling: both live
at stride 4). Level 4 has no up branch. Column 1 has neither up branches nor
gamma paths.
"""

from __future__ import annotations

import weakref
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from . import ops
from .reversible import ColumnState, GammaScale, forward_columns
from .tensor import Parameter, Retained, Rng, ShapeError, Tensor, no_tape

__all__ = [
    "ModelConfig",
    "PRESETS",
    "COLUMN_SWEEP",
    "Module",
    "LayerNorm",
    "ConvNeXtBlock",
    "Fusion",
    "Level",
    "Column",
    "Stem",
    "ClassifierHead",
    "DecoderHead",
    "RevCol",
    "ForwardResult",
    "build_model",
    "preset",
    "count_params",
    "estimate_flops",
    "kernel_pad",
    "pad_model_kernels",
]

LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    blocks: tuple[int, int, int, int] = (1, 1, 1, 1)
    columns: int = 4
    kernel_size: int = 3
    num_classes: int = 4
    input_size: tuple[int, int] = (32, 32)
    head_columns: tuple[int, ...] = ()
    gamma_floor: float = 1e-3
    layer_scale_init: float = 1e-6
    reversible: bool = True
    final_decoder: bool = False

    def validate(self) -> "ModelConfig":
        c, b = tuple(self.channels), tuple(self.blocks)
        if len(c) != 4 or len(b) != 4:
            raise ValueError("channels and blocks must each have 4 entries")
        if any(x < 1 for x in c):
            raise ValueError(f"channels must be positive, got {c}")
        if any(c[i + 1] != 2 * c[i] for i in range(3)):
            raise ValueError(f"channels must double between levels, got {c}")
        if any(x < 0 for x in b):
            raise ValueError(f"block counts must be non-negative, got {b}")
        if self.columns < 1:
            raise ValueError("columns must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        h, w = self.input_size
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise ValueError(f"input size {h}x{w} must be a positive multiple of 32")
        for col in self.head_columns:
            if not 1 <= col <= self.columns:
                raise ValueError(f"head column {col} outside [1, {self.columns}]")
        if self.gamma_floor <= 0:
            raise ValueError("gamma_floor must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("channels", "blocks", "input_size", "head_columns"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d).validate()


def _even_heads(columns: int, n: int = 3) -> tuple[int, ...]:
    # same rule as training.place_heads; at most COL-1 side heads by default
    n = min(n, columns - 1)
    return tuple(int(np.floor(columns * j / (n + 1) + 0.5)) for j in range(1, n + 1))


def _cfg(c, b, col, **kw) -> ModelConfig:
    kw.setdefault("num_classes", 1000)
    kw.setdefault("input_size", (224, 224))
    return ModelConfig(channels=c, blocks=b, columns=col, head_columns=_even_heads(col), **kw)


PRESETS: dict[str, ModelConfig] = {
    "revcol-t": _cfg((64, 128, 256, 512), (2, 2, 4, 2), 4),
    "revcol-s": _cfg((64, 128, 256, 512), (2, 2, 4, 2), 8),
    "revcol-b": _cfg((72, 144, 288, 576), (1, 1, 3, 2), 16),
    "revcol-l": _cfg((128, 256, 512, 1024), (1, 2, 6, 2), 8),
    "revcol-xl": _cfg((224, 448, 896, 1792), (1, 2, 6, 2), 8),
    "revcol-h": _cfg((360, 720, 1440, 2880), (1, 2, 6, 2), 8),
    "tiny-desk": ModelConfig(channels=(8, 16, 32, 64), blocks=(1, 1, 1, 1), columns=4,
                             num_classes=4, input_size=(32, 32), head_columns=_even_heads(4)),
    # column-count sweep at roughly constant budget; widths and depths chosen
    # by search so parameter/FLOP totals land on the target sweep rows
    "sweep-col1": _cfg((96, 192, 384, 768), (3, 3, 9, 3), 1),
    "sweep-col8": _cfg((48, 96, 192, 384), (1, 2, 4, 2), 8),
    "sweep-col12": _cfg((40, 80, 160, 320), (1, 2, 3, 2), 12),
    "sweep-col20": _cfg((24, 48, 96, 192), (2, 2, 5, 4), 20),
}

# COL -> preset name for the column sweep
COLUMN_SWEEP = {1: "sweep-col1", 4: "revcol-t", 8: "sweep-col8", 12: "sweep-col12", 20: "sweep-col20"}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}") from None
    return replace(cfg, **overrides).validate()


# ------------------------------------------------------------------ modules

class Module:
    """Attribute-walking parameter container."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


def _walk(value, name: str):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, GammaScale):
        yield name, value.param
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


def _weight(rng: Rng, *shape) -> Parameter:
    return Parameter(rng.trunc_normal(shape, std=0.02))


def _zeros(n: int) -> Parameter:
    return Parameter(np.zeros(n))


class LayerNorm(Module):
    def __init__(self, channels: int, axis: int = 1):
        self.gain = Parameter(np.ones(channels))
        self.shift = _zeros(channels)
        self.axis = axis

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.shift, LN_EPS, axis=self.axis)


class ConvNeXtBlock(Module):
    """Depthwise k x k conv, channel LayerNorm, 4x pointwise MLP with GELU, layer scale, residual."""

    def __init__(self, channels: int, kernel_size: int, rng: Rng, layer_scale_init: float = 1e-6):
        c = channels
        self.dw_weight = _weight(rng, c, 1, kernel_size, kernel_size)
        self.dw_bias = _zeros(c)
        self.norm = LayerNorm(c)
        self.pw1_weight = _weight(rng, 4 * c, c)
        self.pw1_bias = _zeros(4 * c)
        self.pw2_weight = _weight(rng, c, 4 * c)
        self.pw2_bias = _zeros(c)
        self.layer_scale = Parameter(np.full(c, layer_scale_init))

    @property
    def kernel_size(self) -> int:
        return self.dw_weight.shape[-1]

    def __call__(self, x: Tensor) -> Tensor:
        k = self.kernel_size
        y = ops.conv2d(x, self.dw_weight, self.dw_bias, stride=1, padding=(k - 1) // 2, groups=x.shape[1])
        y = self.norm(y)
        y = ops.gelu(ops.linear(y, self.pw1_weight, self.pw1_bias, axis=1))
        y = ops.linear(y, self.pw2_weight, self.pw2_bias, axis=1)
        return x + ops.scale_channels(y, self.layer_scale)


class Fusion(Module):
    """Sum of a down branch (current column, finer level) and an up branch (previous column, coarser level)."""

    def __init__(self, level: int, channels, rng: Rng, has_up: bool):
        c = channels
        self.level = level
        if level > 1:
            self.down_weight = _weight(rng, c[level - 1], c[level - 2], 2, 2)
            self.down_bias = _zeros(c[level - 1])
            self.down_norm = LayerNorm(c[level - 1])
        if has_up:
            self.up_weight = _weight(rng, c[level - 1], c[level])
            self.up_bias = _zeros(c[level - 1])
            self.up_norm = LayerNorm(c[level - 1])
        self.has_up = has_up

    def down(self, x: Tensor) -> Tensor:
        if self.level == 1:
            return x
        return self.down_norm(ops.conv2d(x, self.down_weight, self.down_bias, stride=2))

    def up(self, x: Tensor) -> Tensor:
        y = self.up_norm(ops.linear(x, self.up_weight, self.up_bias, axis=1))
        return ops.nearest_upsample(y, 2)

    def __call__(self, low: Tensor, high: Tensor | None) -> Tensor:
        y = self.down(low)
        if high is not None:
            if not self.has_up:
                raise ShapeError(f"level {self.level} fusion has no up branch", axis="level")
            u = self.up(high)
            if u.shape != y.shape:
                raise ShapeError(f"fusion branches disagree: down {y.shape} vs up {u.shape}", axis="shape")
            y = y + u
        return y


class Level(Module):
    def __init__(self, level: int, cfg: ModelConfig, rng: Rng, has_up: bool):
        c = cfg.channels[level - 1]
        self.fusion = Fusion(level, cfg.channels, rng, has_up)
        self.blocks = [ConvNeXtBlock(c, cfg.kernel_size, rng, cfg.layer_scale_init)
                       for _ in range(cfg.blocks[level - 1])]

    def __call__(self, low: Tensor, high: Tensor | None) -> Tensor:
        x = self.fusion(low, high)
        for blk in self.blocks:
            x = blk(x)
        return x


class Column(Module):
    def __init__(self, index: int, cfg: ModelConfig, rng: Rng):
        first = index == 1
        self.index = index
        self.levels = [Level(l, cfg, rng, has_up=not first and l < 4) for l in range(1, 5)]
        if not first and cfg.reversible:
            self.gammas = [GammaScale(cfg.channels[l], cfg.gamma_floor) for l in range(4)]
        else:
            self.gammas = []


class Stem(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.weight = _weight(rng, cfg.channels[0], 3, 4, 4)
        self.bias = _zeros(cfg.channels[0])
        self.norm = LayerNorm(cfg.channels[0])

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(ops.conv2d(x, self.weight, self.bias, stride=4))


class ClassifierHead(Module):
    """Global average pool, LayerNorm, linear."""

    def __init__(self, channels: int, num_classes: int, rng: Rng):
        self.norm = LayerNorm(channels, axis=-1)
        self.weight = _weight(rng, num_classes, channels)
        self.bias = _zeros(num_classes)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(self.norm(ops.global_avg_pool(x)), self.weight, self.bias)


class DecoderHead(Module):
    """Three (x2 upsample, halve channels, ConvNeXt block) stages to stride 4, then 3 channels at x4.

    Produces reconstruction logits for a sigmoid BCE against images in [0, 1].
    """

    def __init__(self, channels: int, kernel_size: int, rng: Rng, layer_scale_init: float = 1e-6):
        self.stages = []
        c = channels
        for _ in range(3):
            self.stages.append({"weight": _weight(rng, c // 2, c), "bias": _zeros(c // 2),
                                "block": ConvNeXtBlock(c // 2, kernel_size, rng, layer_scale_init)})
            c //= 2
        self.out_weight = _weight(rng, 3, c)
        self.out_bias = _zeros(3)

    def __call__(self, x: Tensor) -> Tensor:
        for st in self.stages:
            x = ops.linear(ops.nearest_upsample(x, 2), st["weight"], st["bias"], axis=1)
            x = st["block"](x)
        return ops.nearest_upsample(ops.linear(x, self.out_weight, self.out_bias, axis=1), 4)


@dataclass
class ForwardResult:
    """Outputs of one forward pass.

    ``heads[c] = (reconstruction logits or None, class logits)``. In
    reversible mode ``taps`` keeps level 4 of every head column and only the
    stem output and the last column are otherwise alive.
    """

    stem: Tensor
    last: ColumnState
    heads: dict[int, tuple[Tensor | None, Tensor]]
    taps: dict[int, Tensor]
    mode: str
    retained: Retained | None = field(default=None, repr=False)
    last_hold: Retained | None = field(default=None, repr=False)

    @property
    def logits(self) -> Tensor:
        return self.heads[max(self.heads)][1]


class RevCol(Module):
    """Stem, ``COL`` columns, and supervision heads. Also serves as the engine's nonlinear bank."""

    order = 4

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.config = cfg.validate()
        self.stem = Stem(cfg, rng)
        self.columns = [Column(i, cfg, rng) for i in range(1, cfg.columns + 1)]
        c4 = cfg.channels[3]
        self.heads = {}
        for col in sorted(set(cfg.head_columns) | {cfg.columns}):
            with_decoder = col in cfg.head_columns or cfg.final_decoder
            dec = DecoderHead(c4, cfg.kernel_size, rng, cfg.layer_scale_init) if with_decoder else None
            self.heads[col] = {"classifier": ClassifierHead(c4, cfg.num_classes, rng), "decoder": dec}

    # nonlinear bank protocol
    def f(self, column: int, level: int, low: Tensor, high: Tensor | None) -> Tensor:
        return self.columns[column - 1].levels[level - 1](low, high)

    def gamma(self, column: int, level: int) -> GammaScale | None:
        g = self.columns[column - 1].gammas
        return g[level - 1] if g else None

    def gammas(self) -> list[GammaScale]:
        return [g for col in self.columns for g in col.gammas]

    def column_step(self, prev: ColumnState | None, entry: Tensor, column: int) -> ColumnState:
        if prev is not None and not self.config.reversible:
            return self._plain_step(prev, entry, column)
        from .reversible import simplified_column_step
        return simplified_column_step(prev, entry, self, column)

    def _plain_step(self, prev, entry, column):
        # fused multi-column wiring without the gamma path (non-reversible ablation)
        out, low = [], entry
        for level in range(1, 5):
            high = prev[level + 1] if level < 4 else None
            low = self.f(column, level, low, high)
            out.append(low)
        return ColumnState(out)

    def head_forward(self, column: int, level4: Tensor) -> tuple[Tensor | None, Tensor]:
        h = self.heads[column]
        recon = h["decoder"](level4) if h["decoder"] is not None else None
        return recon, h["classifier"](level4)

    def forward(self, images: Tensor, mode: str = "store_all", heads: bool = True) -> ForwardResult:
        """Run the network.

        ``store_all`` lets the active tape record everything. ``reversible``
        records only the stem; columns and heads run without storage.
        ``heads=False`` evaluates only the final classifier.
        """
        if mode not in ("store_all", "reversible"):
            raise ValueError(f"mode must be 'store_all' or 'reversible', got {mode!r}")
        if mode == "reversible" and not self.config.reversible:
            raise ValueError("a non-reversible model cannot run in reversible mode")
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"images must be N,3,H,W; got {images.shape}", axis="C")
        if tuple(images.shape[2:]) != tuple(cfg.input_size):
            raise ShapeError(f"image size {images.shape[2:]} != configured {cfg.input_size}", axis="H")
        stem = self.stem(images)
        wanted = sorted(self.heads) if heads else [cfg.columns]
        taps: dict[int, Tensor] = {}

        def keep(i, state):
            if i in wanted and i != cfg.columns:
                taps[i] = state[4]

        if mode == "store_all":
            last = self._columns(stem, keep)
            outs = {c: self.head_forward(c, taps.get(c, last[4])) for c in wanted}
            return ForwardResult(stem, last, outs, taps, mode)

        with no_tape():
            last = self._columns(stem, keep)
            outs = {c: self.head_forward(c, taps.get(c, last[4])) for c in wanted}
        retained = Retained([stem.data, *(t.data for t in taps.values())])
        last_hold = Retained(last.arrays())
        result = ForwardResult(stem, last, outs, taps, mode, retained, last_hold)
        weakref.finalize(result, retained.release)
        weakref.finalize(result, last_hold.release)
        return result

    def _columns(self, stem: Tensor, on_column) -> ColumnState:
        if self.config.reversible:
            return forward_columns(stem, self, self.config.columns, on_column)
        state = None
        for i in range(1, self.config.columns + 1):
            state = self.column_step(state, stem, i)
            on_column(i, state)
        return state

    def column_states(self, images: Tensor) -> list[ColumnState]:
        """Every column's level maps, computed without recording."""
        states: list[ColumnState] = []
        with no_tape():
            self._columns(self.stem(images), lambda i, s: states.append(s))
        return states

    def backbone_parameters(self) -> list[Parameter]:
        """Stem, columns and the final classifier (what an inference model keeps)."""
        ps = self.stem.parameters()
        for col in self.columns:
            ps += col.parameters()
        ps += self.heads[self.config.columns]["classifier"].parameters()
        return ps

    def state_dict(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())


def build_model(config: ModelConfig, rng: Rng | int = 0) -> RevCol:
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    return RevCol(config.validate(), rng)


def count_params(model: RevCol, aux: bool = False) -> int:
    """Exact parameter count; side heads (training-only) are excluded unless ``aux``."""
    ps = model.parameters() if aux else model.backbone_parameters()
    return int(sum(p.size for p in ps))


def estimate_flops(model: RevCol, input_size: tuple[int, int] | None = None) -> int:
    """Multiply-accumulates of conv/linear layers for one image through the inference path.

    One MAC counts as one FLOP, the convention under which image classifiers
    are usually compared.
    """
    h, w = input_size or model.config.input_size
    if (h, w) != tuple(model.config.input_size):
        model = _resized(model, (h, w))
    x = Tensor(np.zeros((1, 3, h, w), dtype=model.stem.weight.dtype))
    with no_tape(), ops.count_macs() as macs:
        model.forward(x, mode="store_all", heads=False)
    return macs[0]


def _resized(model: RevCol, size) -> RevCol:
    clone = RevCol.__new__(RevCol)
    clone.__dict__.update(model.__dict__)
    clone.config = replace(model.config, input_size=tuple(size)).validate()
    return clone


# --------------------------------------------------------- kernel padding

def kernel_pad(weights: np.ndarray, new_k: int, rng: Rng | None = None, std: float = 1e-7) -> np.ndarray:
    """Embed ``k x k`` kernels at the centre of ``new_k x new_k`` ones with Gaussian(0, std) borders."""
    k = weights.shape[-1]
    if new_k % 2 == 0:
        raise ValueError(f"new kernel size must be odd, got {new_k}")
    if new_k <= k:
        raise ValueError(f"new kernel size {new_k} must exceed {k}")
    shape = weights.shape[:-2] + (new_k, new_k)
    if std > 0:
        out = (rng or Rng(0)).normal(shape, std=std).astype(weights.dtype)
    else:
        out = np.zeros(shape, dtype=weights.dtype)
    o = (new_k - k) // 2
    out[..., o : o + k, o : o + k] = weights
    return out


def pad_model_kernels(model: RevCol, new_k: int, rng: Rng | None = None, std: float = 1e-7) -> RevCol:
    """Pad every depthwise block kernel in place; block padding follows the kernel size."""
    rng = rng or Rng(0)
    for name, p in model.named_parameters():
        if name.endswith("dw_weight") and p.shape[-1] < new_k:
            p.data = kernel_pad(p.data, new_k, rng, std)
    model.config = replace(model.config, kernel_size=new_k)
    return model
