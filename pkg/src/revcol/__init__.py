"""Reversible column networks on a small numpy autodiff core."""

from .model import ModelConfig, PRESETS, RevCol, build_model, count_params, estimate_flops, kernel_pad, preset
from .reversible import reconstruct_column, reversible_backward, simplified_column_step
from .tensor import Parameter, Rng, Tape, Tensor, set_precision
from .training import SupervisionSchedule, TrainConfig, compound_loss, place_heads, train_step

__version__ = "0.1.0"
