"""Consistency and motion metrics on frame embeddings and control points."""

from __future__ import annotations

import dataclasses
import enum
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .synthetic import EXPRESSIVE_INDICES, SceneSpec, _OFFSETS


class EmbeddingMethod(str, enum.Enum):
    DOWNSAMPLE_NORM = "downsample_norm"
    FIXED_RANDOM_PROJECTION = "fixed_random_projection"


@dataclasses.dataclass(frozen=True)
class EmbeddingConfig:
    method: EmbeddingMethod = EmbeddingMethod.DOWNSAMPLE_NORM
    output_dim: int = 64
    seed: int = 0
    grid: int = 8


class DegenerateFrameError(ValidationError):
    """The frame embeds to the zero vector."""


@lru_cache(maxsize=16)
def _projection(seed: int, out_dim: int, in_dim: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)


def embed_frame(frame: np.ndarray, cfg: EmbeddingConfig = EmbeddingConfig()) -> np.ndarray:
    """Area-downsample to ``grid x grid``, flatten, optionally project, L2-normalise."""
    f = np.asarray(frame, dtype=np.float64)
    h, w, c = f.shape
    g = cfg.grid
    if h % g or w % g:
        raise ValidationError(f"frame {h}x{w} not divisible into a {g}x{g} grid")
    v = f.reshape(g, h // g, g, w // g, c).mean(axis=(1, 3)).ravel()
    if EmbeddingMethod(cfg.method) == EmbeddingMethod.FIXED_RANDOM_PROJECTION:
        v = _projection(cfg.seed, cfg.output_dim, v.size) @ v
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DegenerateFrameError("frame embeds to the zero vector")
    return v / norm


def embed_video(video: np.ndarray, cfg: EmbeddingConfig = EmbeddingConfig()) -> np.ndarray:
    return np.stack([embed_frame(f, cfg) for f in video])


def csim(source_frame: np.ndarray, video: np.ndarray, cfg: EmbeddingConfig = EmbeddingConfig()) -> float:
    """Minimum cosine similarity between the source and any frame of the video."""
    if len(video) == 0:
        raise ValidationError("empty video")
    e = embed_video(video, cfg) @ embed_frame(source_frame, cfg)
    return float(np.clip(e.min(), -1.0, 1.0))


def min_pairwise_cosine(video: np.ndarray, cfg: EmbeddingConfig = EmbeddingConfig(), reference: str = "all") -> float:
    """Smallest cosine similarity among frame pairs; ``reference="first"`` only pairs with frame 0."""
    e = embed_video(video, cfg)
    if len(e) < 2:
        return 1.0
    sims = e @ e.T
    if reference == "first":
        vals = sims[0, 1:]
    elif reference == "all":
        vals = sims[np.triu_indices(len(e), k=1)]
    else:
        raise ValidationError(f"unknown reference mode {reference!r}")
    return float(np.clip(vals.min(), -1.0, 1.0))


def self_csim(generated: np.ndarray, driving: np.ndarray, cfg: EmbeddingConfig = EmbeddingConfig(), reference: str = "all") -> float:
    """|min pairwise cosine of the generated video - that of the driving video|; lower is better."""
    if len(generated) != len(driving):
        raise ValidationError(f"length mismatch: {len(generated)} vs {len(driving)}")
    return abs(min_pairwise_cosine(generated, cfg, reference) - min_pairwise_cosine(driving, cfg, reference))


def lmse(generated_points: np.ndarray, driving_points: np.ndarray, subset: Sequence[int] | None = None) -> float:
    """Mean squared coordinate error over frames x points x 2."""
    a = np.asarray(generated_points, dtype=np.float64)
    b = np.asarray(driving_points, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3 or a.shape[-1] != 2:
        raise ValidationError(f"point arrays must share shape [N, K, 2]: {a.shape} vs {b.shape}")
    if subset is not None:
        idx = list(subset)
        a, b = a[:, idx], b[:, idx]
    return float(np.mean((a - b) ** 2))


def expressive_lmse(generated_points, driving_points) -> float:
    return lmse(generated_points, driving_points, EXPRESSIVE_INDICES)


def detect_control_points(frame: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """Locate the shape by its coverage-weighted centroid and place the K points around it.

    Coverage per pixel is the projection of (pixel - background) onto
    (shape colour - background), clipped to [0, 1]. Falls back to the image
    centre when nothing resembles the shape.
    """
    f = np.asarray(frame, dtype=np.float64)
    h, w, _ = f.shape
    bg = 2.0 * np.asarray(spec.background_color) - 1.0
    col = 2.0 * np.asarray(spec.color) - 1.0
    d = col - bg
    alpha = np.clip(((f - bg) @ d) / (d @ d), 0.0, 1.0)
    total = alpha.sum()
    if total <= 1e-9:
        centre = np.array([0.5, 0.5])
    else:
        ys = (np.arange(h) + 0.5)[:, None]
        xs = (np.arange(w) + 0.5)[None, :]
        centre = np.array([(alpha * xs).sum() / total / w, (alpha * ys).sum() / total / h])
    return centre[None, :] + spec.shape_size * _OFFSETS


def detect_video_points(video: np.ndarray, spec: SceneSpec) -> np.ndarray:
    return np.stack([detect_control_points(f, spec) for f in video])
