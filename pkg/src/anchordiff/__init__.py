"""Anchored diffusion for long synthetic reenactment videos.

A sequence diffusion transformer denoises T frames jointly; long videos are
produced from batches of non-uniform frame sequences that share one anchor
frame, with an overlapping-window averaging baseline for comparison.
"""

from .anchored import anchored_generate, multidiffusion_generate, plan_anchored_batch
from .config import RunConfig, load_config, parse_config
from .diffusion import build_schedule, sample_sequence, training_step
from .errors import (
    AnchorDiffError,
    ConfigurationError,
    DivergenceError,
    InsufficientFramesError,
    PlanningError,
    ValidationError,
)
from .metrics import csim, lmse, self_csim
from .model import ModelConfig, SDiT, load_checkpoint, save_checkpoint
from .synthetic import generate_clip, random_scene

__version__ = "0.1.0"

__all__ = [
    "AnchorDiffError", "ConfigurationError", "DivergenceError", "InsufficientFramesError", "ModelConfig",
    "PlanningError", "RunConfig", "SDiT", "ValidationError", "anchored_generate", "build_schedule", "csim",
    "generate_clip", "lmse", "load_checkpoint", "load_config", "multidiffusion_generate", "parse_config",
    "plan_anchored_batch", "random_scene", "sample_sequence", "save_checkpoint", "self_csim", "training_step",
]
