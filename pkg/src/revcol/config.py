"""Plain-text run configuration: ``key = value`` lines with ``#`` comments."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .model import PRESETS, ModelConfig
from .training import SupervisionSchedule, TrainConfig, default_weights, place_heads

__all__ = ["ConfigError", "RunConfig", "parse_config", "parse_config_text", "resolve_config"]


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    schedule: SupervisionSchedule


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.replace(",", " ").split())


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.replace(",", " ").split())


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _size(v: str) -> tuple[int, int]:
    t = _ints(v)
    if len(t) == 1:
        return t[0], t[0]
    if len(t) != 2:
        raise ValueError(f"expected H,W or a single size, got {v!r}")
    return t


def _opt(conv):
    return lambda v: None if v.lower() in ("none", "") else conv(v)


_MODEL_KEYS = {
    "channels": ("channels", _ints), "C": ("channels", _ints),
    "blocks": ("blocks", _ints), "B": ("blocks", _ints),
    "columns": ("columns", int), "COL": ("columns", int),
    "kernel_size": ("kernel_size", int),
    "num_classes": ("num_classes", int),
    "input_size": ("input_size", _size),
    "gamma_floor": ("gamma_floor", float),
    "layer_scale_init": ("layer_scale_init", float),
    "reversible": ("reversible", _bool),
    "final_decoder": ("final_decoder", _bool),
}
_TRAIN_TYPES = {
    "epochs": int, "batch_size": int, "lr": float, "warmup_steps": int,
    "total_steps": _opt(int), "weight_decay": float, "smoothing": float, "seed": int,
    "precision": str, "mode": str, "clip": float, "queue_depth": int,
    "time_limit": _opt(float), "log_every": int,
}
_SCHEDULE_KEYS = {"n": int, "head_columns": _ints, "alpha": _floats, "beta": _floats}
assert set(_TRAIN_TYPES) == {f.name for f in fields(TrainConfig)}


def parse_config_text(text: str) -> RunConfig:
    seen: dict[str, tuple[str, int]] = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", no)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _MODEL_KEYS and key not in _TRAIN_TYPES and key not in _SCHEDULE_KEYS and key != "preset":
            raise ConfigError(f"unknown key {key!r}", no)
        canon = _MODEL_KEYS[key][0] if key in _MODEL_KEYS else key
        if canon in seen:
            raise ConfigError(f"{key!r} repeats line {seen[canon][1]}", no)
        seen[canon] = (value, no)

    def conv(name, fn):
        value, no = seen[name]
        try:
            return fn(value)
        except ValueError as e:
            raise ConfigError(f"bad value for {name}: {e}", no) from None

    if "preset" in seen:
        name, no = seen["preset"]
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}", no)
        base = PRESETS[name]
    elif all(k in seen for k in ("channels", "blocks", "columns")):
        base = ModelConfig()
    else:
        raise ConfigError("missing preset or explicit C/B/COL")

    overrides = {name: conv(name, fn) for name, fn in dict(_MODEL_KEYS.values()).items() if name in seen}
    model = replace(base, **overrides)

    cols = model.columns
    try:
        if "head_columns" in seen:
            heads = conv("head_columns", _ints)
            if "n" in seen and conv("n", int) != len(heads):
                raise ConfigError("n disagrees with the number of head_columns", seen["n"][1])
        elif "n" in seen:
            heads = tuple(place_heads(cols, conv("n", int)))
        elif "columns" in seen or "preset" not in seen:
            heads = tuple(place_heads(cols, min(3, cols - 1)))
        else:
            heads = tuple(model.head_columns)
        a, b = default_weights(len(heads))
        a = conv("alpha", _floats) if "alpha" in seen else a
        b = conv("beta", _floats) if "beta" in seen else b
        schedule = SupervisionSchedule(cols, heads, a, b).validate()
        model = replace(model, head_columns=heads).validate()
        train = TrainConfig(**{k: conv(k, fn) for k, fn in _TRAIN_TYPES.items() if k in seen}).validate()
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"invalid configuration: {e}") from None
    return RunConfig(model, train, schedule)


def parse_config(path: str | Path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def resolve_config(name_or_path: str) -> RunConfig:
    """A preset name or a config file path."""
    if name_or_path in PRESETS:
        return parse_config_text(f"preset = {name_or_path}")
    return parse_config(name_or_path)
