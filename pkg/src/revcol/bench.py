"""Activation-memory benchmark and parameter/FLOP sweeps."""

from __future__ import annotations

import gc
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import synth_dataset
from .model import COLUMN_SWEEP, ModelConfig, PRESETS, build_model, count_params, estimate_flops, preset
from .optim import AdamW
from .tensor import METER
from .training import SupervisionSchedule, TrainConfig, train_step

__all__ = [
    "MemoryRecord",
    "bench_memory",
    "memory_csv",
    "model_report",
    "sweep_columns",
    "sweep_kernel",
    "table_csv",
]


@dataclass
class MemoryRecord:
    col: int
    mode: str
    act_bytes: int
    param_bytes: int
    ms: float
    error: str | None = None


def bench_memory(columns=(1, 2, 4, 8), modes=("store_all", "reversible"), base: ModelConfig | None = None,
                 batch_size: int = 8, seed: int = 0) -> list[MemoryRecord]:
    """Peak retained-for-backward bytes of one full training step per (COL, mode).

    Every column has the same structure, so per-column cost is fixed and only
    COL changes. ``base`` defaults to the tiny desk configuration; only the
    final classifier is supervised so heads do not scale with COL.
    """
    base = base or PRESETS["tiny-desk"]
    h, w = base.input_size
    data = synth_dataset("striped_textures", base.num_classes, batch_size, (h, w), seed)
    out = []
    for col in columns:
        for mode in modes:
            try:
                cfg = replace(base, columns=col, head_columns=()).validate()
                model = build_model(cfg, seed)
                schedule = SupervisionSchedule(col, (), (0.0,), (1.0,))
                tcfg = TrainConfig(batch_size=batch_size, mode=mode, seed=seed, lr=1e-3)
                opt = AdamW(model.parameters())
                gc.collect()
                before = METER.live_bytes
                METER.reset_peak()
                t0 = time.perf_counter()
                train_step(model, (data.images, data.labels), opt, tcfg, schedule, 0, 1)
                ms = (time.perf_counter() - t0) * 1e3
                act = METER.peak_bytes - before
                params = sum(p.data.nbytes for p in model.parameters())
                out.append(MemoryRecord(col, mode, int(act), int(params), ms))
            except (MemoryError, ValueError) as e:
                out.append(MemoryRecord(col, mode, -1, -1, float("nan"), f"{type(e).__name__}: {e}"))
    return out


def memory_csv(records: list[MemoryRecord], path: str | Path | None = None, timing: bool = True) -> str:
    """CSV ``col,mode,act_bytes,param_bytes,ms``; ``timing=False`` writes 0 for ms (byte-stable output)."""
    lines = ["col,mode,act_bytes,param_bytes,ms"]
    for r in records:
        ms = f"{r.ms:.3f}" if timing else "0"
        lines.append(f"{r.col},{r.mode},{r.act_bytes},{r.param_bytes},{ms}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def model_report(cfg: ModelConfig) -> dict:
    """Inference parameters (side heads excluded), all parameters, and MAC-counted FLOPs."""
    model = build_model(cfg, 0)
    return {"params": count_params(model), "params_with_heads": count_params(model, aux=True),
            "flops": estimate_flops(model)}


def sweep_columns(cols=(1, 4, 8, 12, 20)) -> list[dict]:
    """Parameter/FLOP totals of the fixed-budget column-count presets."""
    rows = []
    for c in cols:
        name = COLUMN_SWEEP[c]
        rows.append({"col": c, "preset": name, **model_report(preset(name))})
    return rows


def sweep_kernel(base: str = "revcol-t", kernels=(3, 5, 7, 11)) -> list[dict]:
    """Parameter/FLOP totals as the block kernel grows (counts only; no accuracy)."""
    return [{"kernel": k, "preset": base, **model_report(preset(base, kernel_size=k))} for k in kernels]


def table_csv(rows: list[dict], path: str | Path | None = None) -> str:
    keys = list(rows[0])
    lines = [",".join(keys)] + [",".join(str(r[k]) for k in keys) for r in rows]
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
