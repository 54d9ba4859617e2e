"""``revcol`` command line.

Exit codes: 0 success, 1 validation failure, 2 I/O error, 64 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import nullcontext
from dataclasses import replace

import numpy as np

from .bench import bench_memory, memory_csv, model_report, sweep_columns, sweep_kernel, table_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .cka import cka_by_column, write_cka_csv
from .config import RunConfig, resolve_config
from .data import Dataset, load_idx, synth_dataset
from .model import PRESETS, build_model
from .reversible import reconstruct_column
from .tensor import Rng, Tensor, set_precision
from .training import evaluate, fit, loss_and_grads

__all__ = ["main", "cli_dispatch", "COMMANDS"]

COMMANDS = ("train", "eval", "invert-check", "grad-check", "bench-mem", "report-model",
            "sweep-columns", "sweep-kernel", "cka")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


class CheckFailed(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file path or preset name")
    p.add_argument("--preset", help="preset name (overrides --config)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--precision", choices=("f32", "f64"), default=None)


def build_parser() -> _Parser:
    ap = _Parser(prog="revcol", description="Reversible column networks on numpy.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train and write a checkpoint")
    _common(p)
    p.add_argument("--data", default="synthetic:striped_textures")
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--mode", choices=("store_all", "reversible"), default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="synthetic:striped_textures")
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("invert-check", help="column reconstruction round trip")
    _common(p)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--tol", type=float, default=None)

    p = sub.add_parser("grad-check", help="reversible vs store-all gradients")
    _common(p)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--tol", type=float, default=1e-9)

    p = sub.add_parser("bench-mem", help="retained activation bytes per column count")
    _common(p)
    p.add_argument("--columns", default="1,2,4,8")
    p.add_argument("--mode", default="store_all,reversible")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--no-timing", action="store_true", help="write ms as 0 for byte-stable output")
    p.add_argument("--csv")

    p = sub.add_parser("report-model", help="parameter and FLOP counts")
    _common(p)

    p = sub.add_parser("sweep-columns", help="counts for the column-count presets")
    p.add_argument("--csv")

    p = sub.add_parser("sweep-kernel", help="counts as the block kernel grows")
    p.add_argument("--preset", default="revcol-t")
    p.add_argument("--kernels", default="3,5,7,11")
    p.add_argument("--csv")

    p = sub.add_parser("cka", help="CKA of every column/level against images and labels")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", default="synthetic:striped_textures")
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--csv")
    return ap


# ----------------------------------------------------------------- helpers

def _run_config(args) -> RunConfig:
    name = getattr(args, "preset", None) or getattr(args, "config", None) or "tiny-desk"
    run = resolve_config(name)
    train = run.train
    if getattr(args, "seed", None) is not None:
        train = replace(train, seed=args.seed)
    if getattr(args, "precision", None):
        train = replace(train, precision=args.precision)
    if getattr(args, "mode", None) in ("store_all", "reversible"):
        train = replace(train, mode=args.mode)
    set_precision(train.precision)
    return RunConfig(run.model, train.validate(), run.schedule)


def _dataset(spec: str, model_cfg, samples: int, seed: int) -> Dataset:
    kind, _, rest = spec.partition(":")
    if kind == "synthetic":
        return synth_dataset(rest or "striped_textures", model_cfg.num_classes, samples,
                             tuple(model_cfg.input_size), seed)
    if kind == "idx":
        img, _, lbl = rest.partition(",")
        if not img or not lbl:
            raise UsageError("--data idx:<images>,<labels>")
        ds = load_idx(img, lbl, model_cfg.num_classes)
        if ds.image_size != tuple(model_cfg.input_size):
            raise ValueError(f"data is {ds.image_size}, model expects {tuple(model_cfg.input_size)}")
        return ds
    raise UsageError(f"--data must be idx:<img>,<lbl> or synthetic:<kind>, got {spec!r}")


def _csv_out(text: str, path: str | None) -> None:
    if path:
        with open(path, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _ints(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {s!r}") from None


# ------------------------------------------------------------- subcommands

def cmd_train(args) -> int:
    run = _run_config(args)
    ds = _dataset(args.data, run.model, args.samples, run.train.seed)
    model = build_model(run.model, run.train.seed)
    opt, hist = fit(model, ds, run.train, run.schedule, log=print)
    acc, loss = evaluate(model, ds)
    print(f"done steps={len(hist.records)} seconds={hist.seconds:.1f} train_acc={acc:.4f} ce={loss:.6g}")
    save_checkpoint(model, opt, args.out, {"train": run.train.to_dict(),
                                           "schedule": {"head_columns": list(run.schedule.head_columns),
                                                        "alpha": list(run.schedule.alpha),
                                                        "beta": list(run.schedule.beta)}})
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, extra = load_checkpoint(args.checkpoint)
    set_precision("f32" if model.stem.weight.dtype == np.float32 else "f64")
    ds = _dataset(args.data, model.config, args.samples, args.seed)
    acc, loss = evaluate(model, ds)
    print(f"accuracy={acc:.6f} ce={loss:.6g} samples={len(ds)}")
    return EXIT_OK


def _stressed(model, rng: Rng) -> None:
    # make every block and gamma matter, so the round trip is not trivially exact
    for name, p in model.named_parameters():
        if name.endswith("layer_scale"):
            p.assign(rng.uniform(p.shape, 0.5, 1.0))
    for g in model.gammas():
        g.param.assign(rng.uniform(g.param.shape, 0.5, 1.5))


def cmd_invert_check(args) -> int:
    run = _run_config(args)
    seed = run.train.seed
    model = build_model(run.model, seed)
    rng = Rng(seed).child(7)
    _stressed(model, rng)
    cols = run.model.columns
    if cols < 2:
        raise ValueError("invert-check needs at least 2 columns")
    x = Tensor(rng.uniform((args.batch, 3, *run.model.input_size)))
    states = model.column_states(x)
    stem = model.stem(x)
    first = states[0]
    cur = states[-1]
    for i in range(cols, 1, -1):
        cur = reconstruct_column(cur, stem, model, i)
    err = max(float(np.max(np.abs(a - b))) for a, b in zip(cur.arrays(), first.arrays()))
    tol = args.tol if args.tol is not None else (1e-9 if run.train.precision == "f64" else 1e-3)
    print(f"columns={cols} max_abs_error={err:.3e} tol={tol:.1e}")
    if not err <= tol:
        raise CheckFailed(f"reconstruction error {err:.3e} above {tol:.1e}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    run = _run_config(args)
    seed = run.train.seed
    model = build_model(run.model, seed)
    rng = Rng(seed).child(11)
    _stressed(model, rng)
    ds = synth_dataset("striped_textures", run.model.num_classes, args.batch, tuple(run.model.input_size), seed)
    _, _, ga, _ = loss_and_grads(model, ds.images, ds.labels, run.schedule, "store_all")
    _, _, gb, _ = loss_and_grads(model, ds.images, ds.labels, run.schedule, "reversible")
    worst = 0.0
    for name, p in model.named_parameters():
        a, b = ga.get(p), gb.get(p)
        if a is None or b is None:
            if (a is None) != (b is None):
                raise CheckFailed(f"{name}: gradient present in only one mode")
            continue
        scale = max(float(np.max(np.abs(a))), 1e-300)
        worst = max(worst, float(np.max(np.abs(a - b))) / scale)
    print(f"params={len(model.parameters())} max_rel_diff={worst:.3e} tol={args.tol:.1e}")
    if not worst <= args.tol:
        raise CheckFailed(f"gradient mismatch {worst:.3e} above {args.tol:.1e}")
    return EXIT_OK


def cmd_bench_mem(args) -> int:
    run = _run_config(args)
    modes = [m for m in args.mode.split(",") if m]
    bad = [m for m in modes if m not in ("store_all", "reversible")]
    if bad:
        raise UsageError(f"unknown mode {bad[0]!r}")
    recs = bench_memory(_ints(args.columns), modes, run.model, args.batch, run.train.seed)
    for r in recs:
        if r.error:
            print(f"col={r.col} mode={r.mode} failed: {r.error}", file=sys.stderr)
    _csv_out(memory_csv(recs, timing=not args.no_timing), args.csv)
    return EXIT_OK


def cmd_report_model(args) -> int:
    run = _run_config(args)
    r = model_report(run.model)
    print(f"params={r['params']} ({r['params'] / 1e6:.2f}M) params_with_heads={r['params_with_heads']} "
          f"flops={r['flops']} ({r['flops'] / 1e9:.2f}G)")
    return EXIT_OK


def cmd_sweep_columns(args) -> int:
    _csv_out(table_csv(sweep_columns()), args.csv)
    return EXIT_OK


def cmd_sweep_kernel(args) -> int:
    if args.preset not in PRESETS:
        raise ValueError(f"unknown preset {args.preset!r}")
    _csv_out(table_csv(sweep_kernel(args.preset, tuple(_ints(args.kernels)))), args.csv)
    return EXIT_OK


def cmd_cka(args) -> int:
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
        set_precision("f32" if model.stem.weight.dtype == np.float32 else "f64")
        seed = args.seed or 0
    else:
        run = _run_config(args)
        seed = run.train.seed
        model = build_model(run.model, seed)
    ds = _dataset(args.data, model.config, args.samples, seed)
    _csv_out(write_cka_csv(cka_by_column(model, ds, args.samples)), args.csv)
    return EXIT_OK


_HANDLERS = {
    "train": cmd_train, "eval": cmd_eval, "invert-check": cmd_invert_check, "grad-check": cmd_grad_check,
    "bench-mem": cmd_bench_mem, "report-model": cmd_report_model, "sweep-columns": cmd_sweep_columns,
    "sweep-kernel": cmd_sweep_kernel, "cka": cmd_cka,
}


def _thread_limit():
    n = os.environ.get("REVCOL_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, int(n)))


def cli_dispatch(argv: list[str]) -> int:
    parser = build_parser()
    if not argv or argv[0] not in COMMANDS:
        if argv and argv[0] in ("-h", "--help"):
            parser.print_help()
            return EXIT_OK
        what = f"unknown subcommand {argv[0]!r}" if argv else "missing subcommand"
        print(f"{parser.format_usage()}revcol: error: {what}; choose from {', '.join(COMMANDS)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
        with _thread_limit():
            return _HANDLERS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except CheckFailed as e:
        print(f"check failed: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ArithmeticError) as e:
        print(f"invalid: {e}", file=sys.stderr)
        return EXIT_INVALID


def main(argv: list[str] | None = None) -> int:
    return cli_dispatch(list(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    sys.exit(main())
