"""Shared builders for the test suite."""

import numpy as np

from revcol.model import build_model, preset
from revcol.tensor import Rng


def stress(model, seed=0):
    """Layer scales U(0.5, 1) and gammas U(0.5, 1.5), so every block and gamma path matters."""
    rng = Rng(seed).child(99)
    for name, p in model.named_parameters():
        if name.endswith("layer_scale"):
            p.assign(rng.uniform(p.shape, 0.5, 1.0))
    for g in model.gammas():
        g.param.assign(rng.uniform(g.param.shape, 0.5, 1.5))
    return model


def tiny(seed=0, stressed=True, **overrides):
    model = build_model(preset("tiny-desk", **overrides), seed)
    return stress(model, seed) if stressed else model


def images(n=2, size=32, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, 3, size, size))


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


# one line per acceptance criterion, printed by the terminal summary hook in conftest
ACCEPTANCE_LINES: list[str] = []


def report(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
