"""DDPM schedule, forward noising, weighted loss and the ancestral sampler step."""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigurationError, ValidationError
from .model import SDiT, split_prediction
from .synthetic import EXPRESSIVE_INDICES, TrainingSample

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2
DEFAULT_RADIUS = 2
DEFAULT_LAMBDA_EX = 1.0


@dataclasses.dataclass(frozen=True)
class DiffusionSchedule:
    t_max: int
    betas: torch.Tensor  # float64 [t_max]
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def alpha_bars_prev(self) -> torch.Tensor:
        return torch.cat([torch.ones(1, dtype=torch.float64), self.alpha_bars[:-1]])

    @property
    def posterior_variance(self) -> torch.Tensor:
        return self.betas * (1.0 - self.alpha_bars_prev) / (1.0 - self.alpha_bars)

    def check(self, t: int) -> None:
        if not 0 <= int(t) < self.t_max:
            raise ValidationError(f"timestep {t} outside [0, {self.t_max})")


def default_beta_range(t_max: int) -> tuple[float, float]:
    """Linear range ``[1e-4, 2e-2]`` rescaled by ``1000 / t_max`` so short chains still end near pure noise."""
    scale = 1000.0 / t_max
    return DEFAULT_BETA_START * scale, min(DEFAULT_BETA_END * scale, 0.999)


def build_schedule(t_max: int = 1000, beta_start: float | None = None, beta_end: float | None = None) -> DiffusionSchedule:
    """Linear beta schedule; omitted endpoints come from :func:`default_beta_range`."""
    if beta_start is None or beta_end is None:
        lo, hi = default_beta_range(max(t_max, 1))
        beta_start = lo if beta_start is None else beta_start
        beta_end = hi if beta_end is None else beta_end
    if t_max < 2:
        raise ConfigurationError("t_max must be at least 2")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = torch.linspace(beta_start, beta_end, t_max, dtype=torch.float64)
    alphas = 1.0 - betas
    return DiffusionSchedule(t_max, betas, alphas, torch.cumprod(alphas, 0))


def _per_item(values: torch.Tensor, t: torch.Tensor, ndim: int, dtype) -> torch.Tensor:
    v = values[t].to(dtype)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def add_noise(x0: torch.Tensor, t, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` is an int or one index per leading item."""
    if eps.shape != x0.shape:
        raise ValidationError(f"noise shape {tuple(eps.shape)} != data shape {tuple(x0.shape)}")
    t = torch.as_tensor(t)
    if t.min() < 0 or t.max() >= sched.t_max:
        raise ValidationError(f"timestep outside [0, {sched.t_max})")
    ab = _per_item(sched.alpha_bars, t, x0.ndim, x0.dtype)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def build_weight_map(
    control_points: np.ndarray,
    expressive_indices: Sequence[int] = EXPRESSIVE_INDICES,
    H: int = 32,
    W: int = 32,
    radius: int = DEFAULT_RADIUS,
    lambda_ex: float = DEFAULT_LAMBDA_EX,
) -> np.ndarray:
    """[H, W] map: ``1 + lambda_ex`` within Chebyshev distance ``radius`` of an expressive point, else 1."""
    if radius < 0:
        raise ValidationError("radius must be non-negative")
    pts = np.asarray(control_points, dtype=np.float64)
    wmap = np.ones((H, W), dtype=np.float64)
    for k in expressive_indices:
        x, y = pts[k]
        col = min(max(int(np.floor(x * W)), 0), W - 1)
        row = min(max(int(np.floor(y * H)), 0), H - 1)
        wmap[max(row - radius, 0):row + radius + 1, max(col - radius, 0):col + radius + 1] = 1.0 + lambda_ex
    return wmap


def weighted_mse(pred: torch.Tensor, target: torch.Tensor, wmap: torch.Tensor) -> torch.Tensor:
    """Weighted mean of squared errors over frames, pixels and channels.

    ``pred``/``target`` are [..., H, W, C]; ``wmap`` is [..., H, W] matching the
    leading dimensions (it broadcasts over channels).
    """
    if pred.shape != target.shape:
        raise ValidationError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if wmap.shape != pred.shape[:-1]:
        raise ValidationError(f"weight map {tuple(wmap.shape)} does not match {tuple(pred.shape[:-1])}")
    w = wmap.to(pred.dtype)[..., None]
    return (w * (pred - target) ** 2).sum() / (w.sum() * pred.shape[-1])


@dataclasses.dataclass
class Batch:
    """Training samples stacked into tensors."""

    frames: torch.Tensor  # [B, T, H, W, C]
    G: torch.Tensor  # [B, d_G]
    L: torch.Tensor  # [B, T, d_L]
    wmap: torch.Tensor  # [B, T, H, W]


def collate(samples: Sequence[TrainingSample], radius: int = DEFAULT_RADIUS, lambda_ex: float = DEFAULT_LAMBDA_EX, dtype=torch.float32) -> Batch:
    H, W = samples[0].driving_frames.shape[1:3]
    wmaps = np.stack([
        np.stack([build_weight_map(cp, EXPRESSIVE_INDICES, H, W, radius, lambda_ex) for cp in s.control_points])
        for s in samples
    ])
    return Batch(
        frames=torch.as_tensor(np.stack([s.driving_frames for s in samples]), dtype=dtype),
        G=torch.as_tensor(np.stack([s.global_signal for s in samples]), dtype=dtype),
        L=torch.as_tensor(np.stack([s.local_signals for s in samples]), dtype=dtype),
        wmap=torch.as_tensor(wmaps, dtype=dtype),
    )


def diffusion_loss(model: SDiT, batch: Batch, t: torch.Tensor, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    x_t = add_noise(batch.frames, t, eps, sched)
    out = model(x_t, t, batch.G, batch.L)
    eps_pred, _ = split_prediction(out, model.cfg.channels)
    return weighted_mse(eps_pred, eps, batch.wmap)


def draw_noise(batch: Batch, sched: DiffusionSchedule, generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """One timestep per sequence (uniform on [0, t_max)) and standard-normal noise."""
    t = torch.randint(0, sched.t_max, (batch.frames.shape[0],), generator=generator)
    eps = torch.randn(batch.frames.shape, generator=generator, dtype=batch.frames.dtype)
    return t, eps


def training_step(model: SDiT, sample: TrainingSample | Batch, sched: DiffusionSchedule, generator: torch.Generator) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss and exact gradients for one sample (or pre-collated batch)."""
    dtype = next(model.parameters()).dtype
    batch = sample if isinstance(sample, Batch) else collate([sample], dtype=dtype)
    t, eps = draw_noise(batch, sched, generator)
    model.zero_grad(set_to_none=True)
    loss = diffusion_loss(model, batch, t, eps, sched)
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters() if p.grad is not None}
    return loss.item(), grads


def sampler_step(x_t: torch.Tensor, eps_pred: torch.Tensor, t: int, sched: DiffusionSchedule, generator: torch.Generator | None = None, noise: torch.Tensor | None = None) -> torch.Tensor:
    """DDPM ancestral update with the fixed-small posterior variance.

    Noise is drawn from ``generator`` (shape of ``x_t``) unless given explicitly;
    at ``t == 0`` no noise is drawn or added.
    """
    sched.check(t)
    beta = sched.betas[t].item()
    ab = sched.alpha_bars[t].item()
    mean = (x_t - (beta / (1.0 - ab) ** 0.5) * eps_pred) / (1.0 - beta) ** 0.5
    if t == 0:
        return mean
    if noise is None:
        noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return mean + sched.posterior_variance[t].item() ** 0.5 * noise


@torch.no_grad()
def sample_sequence(model, G: torch.Tensor, L: torch.Tensor, sched: DiffusionSchedule, generator: torch.Generator, image_shape: tuple[int, int, int]) -> torch.Tensor:
    """Plain reverse diffusion for a batch of sequences; returns [B, T, H, W, C]."""
    B, T = L.shape[:2]
    x = torch.randn((B, T, *image_shape), generator=generator, dtype=G.dtype)
    channels = image_shape[-1]
    for t in reversed(range(sched.t_max)):
        eps, _ = split_prediction(model(x, torch.full((B,), t), G, L), channels)
        x = sampler_step(x, eps, t, sched, generator)
    return x
