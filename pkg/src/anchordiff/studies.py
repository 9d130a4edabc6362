"""Experiments: consistency versus video length, and guidance ablation across timesteps."""

from __future__ import annotations

import dataclasses
import logging
import warnings
import zlib
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .anchored import (
    anchored_generate,
    multidiffusion_generate,
    plain_generate,
    plan_anchored_batch,
    plan_windows,
    scatter_frames,
)
from .diffusion import DiffusionSchedule, add_noise, build_schedule, collate
from .errors import PlanningError, ValidationError
from .metrics import EmbeddingConfig, self_csim
from .model import SDiT, split_prediction
from .synthetic import VideoClip, encode_global_signal, encode_local_signal, make_sample

log = logging.getLogger(__name__)

STRATEGIES = ("anchored", "multidiffusion", "plain")
VARIANTS = ("none", "local_only", "global_only", "both")


def _seed(*parts) -> int:
    return zlib.crc32(repr(parts).encode())


def is_valid_length(strategy: str, n: int, T: int, overlap: int = 1) -> bool:
    try:
        if strategy == "anchored":
            plan_anchored_batch(n, T, (n - 1) // (T - 1) if T > 1 else 0)
        elif strategy == "multidiffusion":
            plan_windows(n, T, overlap)
        elif strategy == "plain":
            return n == T
        else:
            raise ValidationError(f"unknown strategy {strategy!r}")
    except PlanningError:
        return False
    return True


def fitted_length(length: int, strategies: Sequence[str], T: int, overlap: int = 1, limit: int = 10_000) -> int | None:
    """Smallest n >= length valid for every strategy, or None."""
    for n in range(length, limit):
        if all(is_valid_length(s, n, T, overlap) for s in strategies):
            return n
    return None


def self_reenactment_inputs(clip: VideoClip, n: int):
    """Driving frames 0..n-1 and the last clip frame as source (farthest from them)."""
    if clip.num_frames < n + 1:
        raise ValidationError(f"clip has {clip.num_frames} frames, need {n + 1}")
    src = clip.num_frames - 1
    G = torch.as_tensor(encode_global_signal(clip, src), dtype=torch.float32)
    L = torch.as_tensor(np.stack([encode_local_signal(p) for p in clip.control_points[:n]]), dtype=torch.float32)
    return G, L, clip.frames[:n]


def generate_video(
    model,
    strategy: str,
    G: torch.Tensor,
    frame_signals: torch.Tensor,
    sched: DiffusionSchedule,
    generator: torch.Generator,
    image_shape: tuple[int, int, int],
    T: int,
    overlap: int = 1,
    return_rows: bool = False,
    workers: int = 1,
):
    """Generate ``len(frame_signals)`` frames with one of :data:`STRATEGIES`."""
    n = len(frame_signals)
    rows = None
    if strategy == "anchored":
        plan = plan_anchored_batch(n, T, (n - 1) // (T - 1))
        video, rows = anchored_generate(
            model, plan, G, scatter_frames(frame_signals, plan), sched, generator, image_shape,
            workers=workers, return_rows=True,
        )
    elif strategy == "multidiffusion":
        video = multidiffusion_generate(model, n, T, overlap, G, frame_signals, sched, generator, image_shape)
    elif strategy == "plain":
        if n != T:
            raise PlanningError(f"plain sampling produces exactly {T} frames, asked for {n}")
        video = plain_generate(model, G, frame_signals, sched, generator, image_shape)
    else:
        raise ValidationError(f"unknown strategy {strategy!r}")
    return (video, rows) if return_rows else video


@dataclasses.dataclass
class CurveRow:
    strategy: str
    length: int
    generated_length: int
    mean_self_csim: float
    std_self_csim: float
    count: int


def consistency_curve(
    model: SDiT,
    driving_clips: Sequence[VideoClip],
    lengths: Iterable[int],
    strategies: Sequence[str] = ("anchored", "multidiffusion"),
    seeds: int = 1,
    sched: DiffusionSchedule | None = None,
    overlap: int = 1,
    fit: str = "extend",
    embed_cfg: EmbeddingConfig = EmbeddingConfig(),
) -> list[CurveRow]:
    """Mean Self-CSIM of self-reenactment videos per (strategy, length).

    With ``fit="extend"`` a length no strategy can produce exactly is generated
    at the next common valid length and cropped to its first ``length`` frames;
    ``fit="skip"`` drops it with a warning. Strategies share the noise seed for
    a given (clip, seed, length), so comparisons are paired.
    """
    cfg = model.cfg
    sched = sched or build_schedule(cfg.t_max)
    T = cfg.frames_per_sequence
    shape = (cfg.image_size, cfg.image_size, cfg.channels)
    rows: list[CurveRow] = []
    for length in lengths:
        if all(is_valid_length(s, length, T, overlap) for s in strategies):
            n = length
        elif fit == "extend":
            n = fitted_length(length, strategies, T, overlap)
        else:
            n = None
        if n is None:
            warnings.warn(f"length {length} is not reachable by {strategies} with T={T}; skipped")
            continue
        scores: dict[str, list[float]] = {s: [] for s in strategies}
        for ci, clip in enumerate(driving_clips):
            G, L, driving = self_reenactment_inputs(clip, n)
            for seed in range(seeds):
                for strategy in strategies:
                    gen = torch.Generator().manual_seed(_seed(ci, seed, n))
                    video = generate_video(model, strategy, G, L, sched, gen, shape, T, overlap)
                    scores[strategy].append(
                        self_csim(video[:length].numpy(), driving[:length], embed_cfg)
                    )
        for strategy in strategies:
            v = np.asarray(scores[strategy])
            rows.append(CurveRow(strategy, length, n, float(v.mean()), float(v.std()), len(v)))
            log.info("%s length %d: Self-CSIM %.4f", strategy, length, v.mean())
    return rows


@dataclasses.dataclass
class AblationRow:
    bin_index: int
    t_lo: int
    t_hi: int
    variant: str
    mse: float
    ratio: float


def denoising_mse_by_bin(
    model: SDiT,
    clips: Sequence[VideoClip],
    sched: DiffusionSchedule,
    num_bins: int,
    per_bin: int,
    seed: int,
) -> np.ndarray:
    """Mean noise-prediction MSE per timestep bin on a fixed set of draws."""
    cfg = model.cfg
    T = cfg.frames_per_sequence
    dtype = next(model.parameters()).dtype
    edges = np.linspace(0, sched.t_max, num_bins + 1).astype(int)
    out = np.zeros(num_bins)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for b in range(num_bins):
            samples = []
            for _ in range(per_bin):
                clip = clips[int(rng.integers(len(clips)))]
                idx = np.sort(rng.choice(clip.num_frames, T, replace=False))
                samples.append(make_sample(clip, idx))
            batch = collate(samples, dtype=dtype)
            t = torch.as_tensor(rng.integers(edges[b], edges[b + 1], per_bin))
            eps = torch.randn(batch.frames.shape, generator=gen, dtype=dtype)
            x_t = add_noise(batch.frames, t, eps, sched)
            pred, _ = split_prediction(model(x_t, t, batch.G, batch.L), cfg.channels)
            out[b] = float(((pred - eps) ** 2).mean())
    return out


def guidance_ablation(
    models: Mapping[str, SDiT],
    clips: Sequence[VideoClip],
    num_bins: int = 10,
    per_bin: int = 64,
    seed: int = 0,
    sched: DiffusionSchedule | None = None,
) -> list[AblationRow]:
    """Per-bin MSE of each guidance variant divided by the unguided variant's MSE."""
    missing = [v for v in VARIANTS if v not in models]
    if missing:
        raise ValidationError(f"missing guidance variants: {missing}")
    untrained = [v for v, m in models.items() if m.trained_steps == 0]
    if untrained:
        raise ValidationError(f"untrained guidance variants: {untrained}")
    t_max = models["none"].cfg.t_max
    sched = sched or build_schedule(t_max)
    edges = np.linspace(0, sched.t_max, num_bins + 1).astype(int)
    mse = {v: denoising_mse_by_bin(models[v], clips, sched, num_bins, per_bin, seed) for v in VARIANTS}
    rows = []
    for b in range(num_bins):
        for v in VARIANTS:
            rows.append(AblationRow(b, int(edges[b]), int(edges[b + 1]), v, float(mse[v][b]), float(mse[v][b] / mse["none"][b])))
    return rows


def middle_bins(num_bins: int) -> range:
    """Central half of the bins."""
    return range(num_bins // 4, num_bins - num_bins // 4)


def mean_middle_ratio(rows: Sequence[AblationRow], variant: str) -> float:
    nb = max(r.bin_index for r in rows) + 1
    mids = set(middle_bins(nb))
    return float(np.mean([r.ratio for r in rows if r.variant == variant and r.bin_index in mids]))
