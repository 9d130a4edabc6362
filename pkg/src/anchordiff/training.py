"""Training loop: AdamW with cosine annealing and a slower mapping network."""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Callable

import numpy as np
import torch

from .diffusion import (
    DEFAULT_LAMBDA_EX,
    DEFAULT_RADIUS,
    DiffusionSchedule,
    build_schedule,
    collate,
    diffusion_loss,
    draw_noise,
)
from .errors import DivergenceError
from .model import ModelConfig, SDiT, mapping_parameter_names
from .synthetic import VideoClip, generate_clip, random_scene, sample_nonuniform_sequence

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class DataConfig:
    num_clips: int = 64
    clip_frames: int = 32
    seed: int = 0
    max_amplitude: float = 0.25
    jitter: float = 0.0
    texture: float = 0.0


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    base_lr: float = 6.4e-5
    mapping_lr_factor: float = 0.1
    weight_decay: float = 0.01
    beta_start: float | None = None  # None: default_beta_range(t_max)
    beta_end: float | None = None
    radius: int = DEFAULT_RADIUS
    lambda_ex: float = DEFAULT_LAMBDA_EX
    grad_clip: float = 0.0


def cosine_rate(step: int, steps: int, base: float) -> float:
    """Cosine-annealed rate: ``base`` at step 0, 0 at ``steps``."""
    if steps <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, steps) / steps))


def make_clips(data: DataConfig, image_size: int, patch_size: int = 2) -> list[VideoClip]:
    rng = np.random.default_rng(data.seed)
    return [
        generate_clip(
            random_scene(rng, max_amplitude=data.max_amplitude, jitter=data.jitter, texture=data.texture),
            data.clip_frames, image_size, image_size, patch_size,
        )
        for _ in range(data.num_clips)
    ]


def build_optimizer(model: SDiT, train_cfg: TrainConfig) -> torch.optim.AdamW:
    mapping = mapping_parameter_names(model)
    main = [p for n, p in model.named_parameters() if n not in mapping]
    slow = [p for n, p in model.named_parameters() if n in mapping]
    return torch.optim.AdamW(
        [
            {"params": main, "lr": train_cfg.base_lr},
            {"params": slow, "lr": train_cfg.base_lr * train_cfg.mapping_lr_factor},
        ],
        weight_decay=train_cfg.weight_decay,
    )


@dataclasses.dataclass
class TrainState:
    model: SDiT
    optimizer: torch.optim.AdamW
    scheduler: torch.optim.lr_scheduler.CosineAnnealingLR
    sched: DiffusionSchedule
    np_rng: np.random.Generator
    generator: torch.Generator
    step: int = 0
    losses: list = dataclasses.field(default_factory=list)


def init_state(model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int, model: SDiT | None = None) -> TrainState:
    torch.manual_seed(seed)
    model = SDiT(model_cfg) if model is None else model
    opt = build_optimizer(model, train_cfg)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(train_cfg.steps, 1), eta_min=0.0)
    gen = torch.Generator().manual_seed(seed)
    return TrainState(
        model, opt, scheduler, build_schedule(model_cfg.t_max, train_cfg.beta_start, train_cfg.beta_end),
        np.random.default_rng(seed), gen,
    )


def run_steps(
    state: TrainState,
    clips: list[VideoClip],
    train_cfg: TrainConfig,
    num_steps: int,
    sample_fn: Callable | None = None,
    on_step: Callable[[int, float, float], None] | None = None,
) -> TrainState:
    """Advance training by ``num_steps`` optimizer steps.

    ``sample_fn(rng)`` overrides the sample draw (used for single-sample overfitting).
    """
    model = state.model
    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    model.train()
    for _ in range(num_steps):
        if sample_fn is None:
            picks = state.np_rng.integers(0, len(clips), train_cfg.batch_size)
            samples = [sample_nonuniform_sequence(clips[i], cfg.frames_per_sequence, state.np_rng) for i in picks]
        else:
            samples = sample_fn(state.np_rng)
        batch = collate(samples, train_cfg.radius, train_cfg.lambda_ex, dtype=dtype)
        t, eps = draw_noise(batch, state.sched, state.generator)
        state.optimizer.zero_grad(set_to_none=True)
        loss = diffusion_loss(model, batch, t, eps, state.sched)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss.item()} at step {state.step}")
        loss.backward()
        if train_cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
        lr = state.optimizer.param_groups[0]["lr"]
        state.optimizer.step()
        state.scheduler.step()
        state.step += 1
        model.trained_steps += 1
        state.losses.append(loss.item())
        if on_step is not None:
            on_step(state.step, loss.item(), lr)
        if state.step % 100 == 0:
            log.info("step %d loss %.5f lr %.3g", state.step, loss.item(), lr)
    model.eval()
    return state


def train(
    model_cfg: ModelConfig,
    data_cfg: DataConfig,
    train_cfg: TrainConfig,
    seed: int = 0,
    clips: list[VideoClip] | None = None,
) -> tuple[SDiT, list[float]]:
    """Train a fresh model; returns the model and its per-step loss trace."""
    if clips is None:
        clips = make_clips(data_cfg, model_cfg.image_size, model_cfg.patch_size)
    state = init_state(model_cfg, train_cfg, seed)
    run_steps(state, clips, train_cfg, train_cfg.steps)
    return state.model, state.losses
