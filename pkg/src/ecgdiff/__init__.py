"""Conditional diffusion denoising for single-lead ECG-like signals."""
from .diffusion import make_schedule, multi_shot_denoise, reverse_sample
from .metrics import SignalRecord, cosine_sim, mad, prd, ssd
from .model import ModelConfig, count_parameters, init_params

__version__ = "0.1.0"
__all__ = [
    "make_schedule", "multi_shot_denoise", "reverse_sample",
    "SignalRecord", "ssd", "mad", "prd", "cosine_sim",
    "ModelConfig", "init_params", "count_parameters",
]
