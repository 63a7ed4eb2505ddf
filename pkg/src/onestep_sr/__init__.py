"""Desk-scale one-step diffusion distillation for image super-resolution."""

from .config import TrainConfig, load_config
from .dasm import DasmConfig, accumulate_tsd, rollout
from .degradation import DegradationRecipe, PairedDataset, degrade, make_pairs, synth_hq
from .losses import LossBreakdown, LossWeights, tsd_gradient, tsm_gradient, vsd_gradient
from .metrics import MetricsReport, evaluate, psnr_y, ssim_y
from .scheduler import TimestepSchedule, add_noise, euler_step, make_schedule

__all__ = [
    "DasmConfig", "DegradationRecipe", "LossBreakdown", "LossWeights", "MetricsReport", "PairedDataset",
    "TimestepSchedule", "TrainConfig", "accumulate_tsd", "add_noise", "degrade", "euler_step", "evaluate",
    "load_config", "make_pairs", "make_schedule", "psnr_y", "rollout", "ssim_y", "synth_hq", "tsd_gradient",
    "tsm_gradient", "vsd_gradient",
]
