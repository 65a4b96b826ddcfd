"""Spiking diffusion transformer with RWKV mixing, on a small numpy autodiff core."""

from .diffusion import AdamW, NoiseSchedule, ddpm_sample, loss_step, make_schedule, q_sample
from .model import PRESETS, ModelConfig, SditModel, count_macs, count_params, model_forward
from .spiking import LifConfig, LifState, lif_step
from .tensor import Tensor, backward, grad_check, gradients, no_grad, parameter

__all__ = [
    "AdamW", "LifConfig", "LifState", "ModelConfig", "NoiseSchedule", "PRESETS", "SditModel",
    "Tensor", "backward", "count_macs", "count_params", "ddpm_sample", "grad_check",
    "gradients", "lif_step", "loss_step", "make_schedule", "model_forward", "no_grad",
    "parameter", "q_sample",
]
__version__ = "0.1.0"
