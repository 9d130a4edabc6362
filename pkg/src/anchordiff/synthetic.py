"""Procedural toy videos: one moving shape over a flat background.

The clips stand in for real driving videos. Appearance fields of a
:class:`SceneSpec` act as the identity, the analytic control points act as
per-frame landmarks, and :func:`encode_global_signal` plays the role of an
image embedding of the source frame.
"""

from __future__ import annotations

import dataclasses
import enum
import math
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InsufficientFramesError, ValidationError

NUM_CONTROL_POINTS = 8
EXPRESSIVE_INDICES = (0, 1, 2)
COARSE_GRID = 4

# Control point layout relative to the shape centre, in units of shape_size
# (the shape diameter). Point 0 is the centre, 1-2 are the "eyes", 3-7 sit on
# the circumscribed circle.
_OFFSETS = np.array(
    [(0.0, 0.0), (-0.2, -0.15), (0.2, -0.15)]
    + [(0.5 * math.cos(a), 0.5 * math.sin(a)) for a in np.linspace(0.0, 2 * math.pi, 5, endpoint=False) + 0.3],
    dtype=np.float64,
)


class ShapeKind(enum.IntEnum):
    DISK = 0
    SQUARE = 1
    TRIANGLE = 2


class MotionKind(enum.IntEnum):
    SINE = 0
    LINEAR = 1


@dataclasses.dataclass(frozen=True)
class Motion:
    """Trajectory of the shape centre in normalized image coordinates.

    ``SINE``: ``c(n) = 0.5 + amplitude * sin(frequency * n + phase)``.
    ``LINEAR``: ``c(n) = 0.5 + amplitude * (2 n / (N - 1) - 1)``, frequency and
    phase ignored. ``jitter`` is the std of seeded Gaussian offsets added to the
    centre of every frame.
    """

    kind: MotionKind = MotionKind.SINE
    amplitude: tuple[float, float] = (0.0, 0.0)
    frequency: tuple[float, float] = (0.0, 0.0)
    phase: tuple[float, float] = (0.0, 0.0)
    jitter: float = 0.0


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    seed: int
    shape_kind: ShapeKind
    shape_size: float
    color: tuple[float, float, float]
    background_color: tuple[float, float, float]
    motion: Motion = Motion()
    texture: float = 0.0  # contrast of the seeded background stripes, in colour units

    def __post_init__(self):
        if not 0.0 < self.shape_size < 1.0:
            raise ValidationError(f"shape_size must lie in (0, 1), got {self.shape_size}")
        for name in ("color", "background_color"):
            c = getattr(self, name)
            if len(c) != 3 or any(not 0.0 <= v <= 1.0 for v in c):
                raise ValidationError(f"{name} must be 3 floats in [0, 1], got {c}")
        reach = 0.5 * self.shape_size + max(abs(a) for a in self.motion.amplitude)
        if reach > 0.5:
            raise ValidationError("motion amplitude plus shape radius leaves the frame")
        if self.motion.jitter < 0:
            raise ValidationError("jitter must be non-negative")
        bg = np.asarray(self.background_color)
        if self.texture < 0 or np.any(bg - self.texture < 0) or np.any(bg + self.texture > 1):
            raise ValidationError("background colour +- texture must stay within [0, 1]")

    def identity_vector(self) -> np.ndarray:
        """One-hot shape kind, size, shape colour and background colour (10 values)."""
        onehot = np.zeros(len(ShapeKind))
        onehot[int(self.shape_kind)] = 1.0
        return np.concatenate([onehot, [self.shape_size], self.color, self.background_color])


@dataclasses.dataclass
class VideoClip:
    frames: np.ndarray  # [N, H, W, C] in [-1, 1]
    control_points: np.ndarray  # [N, K, 2] (x, y) in [0, 1]
    spec: SceneSpec

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def subclip(self, indices: Sequence[int]) -> "VideoClip":
        idx = np.asarray(indices)
        return VideoClip(self.frames[idx], self.control_points[idx], self.spec)


@dataclasses.dataclass
class TrainingSample:
    indices: np.ndarray  # [T], strictly increasing
    source_index: int
    driving_frames: np.ndarray  # [T, H, W, C]
    source_frame: np.ndarray  # [H, W, C]
    global_signal: np.ndarray  # [d_G]
    local_signals: np.ndarray  # [T, 2K]
    control_points: np.ndarray  # [T, K, 2], kept for weight maps


def random_scene(
    rng: np.random.Generator, *, max_amplitude: float = 0.25, jitter: float = 0.0, texture: float = 0.0
) -> SceneSpec:
    """Draw a valid scene with random identity and sinusoidal motion.

    ``texture`` is the stripe contrast; stripe orientation and offset follow
    from the drawn seed.
    """
    size = float(rng.uniform(0.3, 0.5))
    amp_cap = min(max_amplitude, 0.5 - 0.5 * size - 3 * jitter)
    color = rng.uniform(0.0, 1.0, 3)
    background = rng.uniform(texture, 1.0 - texture, 3)
    # keep shape and background distinguishable
    while np.abs(color - background).max() < 0.35:
        background = rng.uniform(texture, 1.0 - texture, 3)
    motion = Motion(
        kind=MotionKind.SINE,
        amplitude=tuple(float(a) for a in rng.uniform(0.3, 1.0, 2) * amp_cap),
        frequency=tuple(float(f) for f in rng.uniform(0.1, 0.4, 2)),
        phase=tuple(float(p) for p in rng.uniform(0.0, 2 * math.pi, 2)),
        jitter=jitter,
    )
    return SceneSpec(
        seed=int(rng.integers(0, 2**63 - 1)),
        shape_kind=ShapeKind(int(rng.integers(0, len(ShapeKind)))),
        shape_size=size,
        color=tuple(float(c) for c in color),
        background_color=tuple(float(c) for c in background),
        motion=motion,
        texture=float(texture),
    )


def trajectory(spec: SceneSpec, num_frames: int) -> np.ndarray:
    """Shape centre per frame, shape [N, 2] as (x, y)."""
    m = spec.motion
    n = np.arange(num_frames, dtype=np.float64)
    amp = np.asarray(m.amplitude, dtype=np.float64)
    if m.kind == MotionKind.LINEAR:
        ramp = 2.0 * n / max(num_frames - 1, 1) - 1.0
        centre = 0.5 + amp[None, :] * ramp[:, None]
    else:
        freq = np.asarray(m.frequency, dtype=np.float64)
        phase = np.asarray(m.phase, dtype=np.float64)
        centre = 0.5 + amp[None, :] * np.sin(freq[None, :] * n[:, None] + phase[None, :])
    if m.jitter > 0:
        rng = np.random.default_rng(spec.seed)
        centre = centre + rng.normal(0.0, m.jitter, centre.shape)
        lim = 0.5 * spec.shape_size
        centre = np.clip(centre, lim, 1.0 - lim)
    return centre


def control_points_for(spec: SceneSpec, centres: np.ndarray) -> np.ndarray:
    """Control points [N, K, 2] from shape centres [N, 2]."""
    return centres[:, None, :] + spec.shape_size * _OFFSETS[None, :, :]


def _coverage(spec: SceneSpec, cx: float, cy: float, height: int, width: int) -> np.ndarray:
    # pixel centres in pixel units; shapes are sized relative to the image height
    ys = np.arange(height, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(width, dtype=np.float64)[None, :] + 0.5
    dx = xs - cx * width
    dy = ys - cy * height
    radius = 0.5 * spec.shape_size * height
    if spec.shape_kind == ShapeKind.DISK:
        sdf = np.sqrt(dx**2 + dy**2) - radius
    elif spec.shape_kind == ShapeKind.SQUARE:
        sdf = np.maximum(np.abs(dx), np.abs(dy)) - radius * 0.8
    else:
        # upward equilateral triangle inscribed in the circle of the given radius
        normals = [(0.0, 1.0), (math.sqrt(3) / 2, -0.5), (-math.sqrt(3) / 2, -0.5)]
        sdf = np.max([nx * dx + ny * dy for nx, ny in normals], axis=0) - 0.5 * radius
    return np.clip(0.5 - sdf, 0.0, 1.0)


def background_pattern(spec: SceneSpec, height: int, width: int) -> np.ndarray:
    """[H, W] field of +-1 stripes, or zeros when the scene has no texture.

    The period equals one cell of the coarse grid used by the global signal, so
    every coarse cell averages the pattern to exactly zero: the global signal
    carries the background colour but not the stripes.
    """
    if spec.texture == 0.0:
        return np.zeros((height, width))
    rng = np.random.default_rng([spec.seed & 0x7FFFFFFFFFFFFFFF, 1])
    vertical = bool(rng.integers(0, 2))
    size = width if vertical else height
    period = size // COARSE_GRID
    if period < 2 or period % 2 or size % COARSE_GRID:
        raise ConfigurationError(f"textured scenes need a side divisible by {2 * COARSE_GRID}, got {size}")
    # half-period offsets keep the stripes aligned with a grid twice as fine as the coarse one
    offset = int(rng.integers(0, 2)) * (period // 2)
    stripe = np.where((np.arange(size) + offset) % period < period // 2, 1.0, -1.0)
    return np.broadcast_to(stripe[None, :] if vertical else stripe[:, None], (height, width)).copy()


def generate_clip(spec: SceneSpec, num_frames: int, height: int = 32, width: int = 32, patch_size: int = 2) -> VideoClip:
    if num_frames < 2:
        raise ValidationError("a clip needs at least 2 frames")
    if height < 8 or width < 8 or height % patch_size or width % patch_size:
        raise ConfigurationError(f"frame size {height}x{width} must be >= 8 and divisible by patch size {patch_size}")
    centres = trajectory(spec, num_frames)
    colour = 2.0 * np.asarray(spec.color) - 1.0
    background = 2.0 * np.asarray(spec.background_color) - 1.0
    background = background + 2.0 * spec.texture * background_pattern(spec, height, width)[..., None]
    frames = np.empty((num_frames, height, width, 3), dtype=np.float32)
    for n, (cx, cy) in enumerate(centres):
        alpha = _coverage(spec, cx, cy, height, width)[..., None]
        frames[n] = (1.0 - alpha) * background + alpha * colour
    points = control_points_for(spec, centres)
    if points.min() < 0.0 or points.max() > 1.0:
        raise ValidationError("control points left the unit square")
    return VideoClip(frames=frames, control_points=points, spec=spec)


def _area_downsample(frame: np.ndarray, size: int) -> np.ndarray:
    h, w, c = frame.shape
    if h % size or w % size:
        raise ValidationError(f"cannot downsample {h}x{w} to {size}x{size}")
    return frame.reshape(size, h // size, size, w // size, c).mean(axis=(1, 3))


def encode_global_signal(clip: VideoClip, frame_index: int) -> np.ndarray:
    """Identity fields followed by a 4x4 area-averaged rendering of one frame."""
    if not 0 <= frame_index < clip.num_frames:
        raise ValidationError(f"frame index {frame_index} out of range [0, {clip.num_frames})")
    coarse = _area_downsample(clip.frames[frame_index].astype(np.float64), COARSE_GRID)
    return np.concatenate([clip.spec.identity_vector(), coarse.ravel()])


def global_signal_dim(channels: int = 3) -> int:
    return len(ShapeKind) + 1 + 3 + 3 + COARSE_GRID * COARSE_GRID * channels


def encode_local_signal(points: np.ndarray) -> np.ndarray:
    """Flatten a [K, 2] array of control points into a length-2K vector."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValidationError(f"expected [K, 2] control points, got {points.shape}")
    if points.min() < 0.0 or points.max() > 1.0:
        raise ValidationError("control point coordinates must lie in [0, 1]")
    return points.reshape(-1).copy()


def decode_local_signal(vector: np.ndarray) -> np.ndarray:
    return np.asarray(vector).reshape(-1, 2)


def source_index_for(indices: Sequence[int], num_frames: int) -> int:
    """Endpoint of the clip farther from the selected indices; ties go to 0."""
    left_gap = indices[0]
    right_gap = num_frames - 1 - indices[-1]
    return num_frames - 1 if right_gap > left_gap else 0


def make_sample(clip: VideoClip, indices: Sequence[int], source_index: int | None = None) -> TrainingSample:
    idx = np.asarray(indices, dtype=np.int64)
    if np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= clip.num_frames:
        raise ValidationError(f"indices must be strictly increasing within the clip: {idx.tolist()}")
    if source_index is None:
        source_index = source_index_for(idx, clip.num_frames)
    return TrainingSample(
        indices=idx,
        source_index=int(source_index),
        driving_frames=clip.frames[idx],
        source_frame=clip.frames[source_index],
        global_signal=encode_global_signal(clip, source_index),
        local_signals=np.stack([encode_local_signal(p) for p in clip.control_points[idx]]),
        control_points=clip.control_points[idx],
    )


def sample_nonuniform_sequence(clip: VideoClip, T: int, rng: np.random.Generator) -> TrainingSample:
    """Pick T frames uniformly without replacement, sorted, plus the far endpoint as source."""
    if T < 2:
        raise ValidationError("sequence length must be at least 2")
    n = clip.num_frames
    if T + 1 > n:
        raise InsufficientFramesError(f"need at least {T + 1} frames, clip has {n}")
    idx = np.sort(rng.choice(n, size=T, replace=False))
    return make_sample(clip, idx)


# -- AVD1 clip files ---------------------------------------------------------

CLIP_MAGIC = b"AVD1"
_SPEC_STRUCT = struct.Struct("<qid3d3di2d2d2ddd")


def _pack_spec(spec: SceneSpec) -> bytes:
    m = spec.motion
    return _SPEC_STRUCT.pack(
        spec.seed, int(spec.shape_kind), spec.shape_size, *spec.color, *spec.background_color,
        int(m.kind), *m.amplitude, *m.frequency, *m.phase, m.jitter, spec.texture,
    )


def _unpack_spec(buf: bytes) -> SceneSpec:
    v = _SPEC_STRUCT.unpack(buf)
    motion = Motion(MotionKind(v[9]), (v[10], v[11]), (v[12], v[13]), (v[14], v[15]), v[16])
    return SceneSpec(v[0], ShapeKind(v[1]), v[2], tuple(v[3:6]), tuple(v[6:9]), motion, v[17])


def clip_to_bytes(clip: VideoClip) -> bytes:
    n, h, w, c = clip.frames.shape
    k = clip.control_points.shape[1]
    return b"".join([
        CLIP_MAGIC,
        struct.pack("<5i", n, h, w, c, k),
        clip.frames.astype("<f4").tobytes(),
        clip.control_points.astype("<f4").tobytes(),
        _pack_spec(clip.spec),
    ])


def clip_from_bytes(buf: bytes) -> VideoClip:
    if buf[:4] != CLIP_MAGIC:
        raise ValidationError("not an AVD1 clip file")
    n, h, w, c, k = struct.unpack_from("<5i", buf, 4)
    off = 24
    nf = n * h * w * c
    frames = np.frombuffer(buf, dtype="<f4", count=nf, offset=off).reshape(n, h, w, c).astype(np.float32)
    off += 4 * nf
    points = np.frombuffer(buf, dtype="<f4", count=n * k * 2, offset=off).reshape(n, k, 2).astype(np.float64)
    off += 4 * n * k * 2
    spec = _unpack_spec(buf[off:off + _SPEC_STRUCT.size])
    return VideoClip(frames, points, spec)


def save_clip(clip: VideoClip, path: str | Path) -> None:
    Path(path).write_bytes(clip_to_bytes(clip))


def load_clip(path: str | Path) -> VideoClip:
    return clip_from_bytes(Path(path).read_bytes())


def frames_to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(frames) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def dump_pngs(frames: np.ndarray, directory: str | Path, prefix: str = "frame") -> list[Path]:
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(frames_to_uint8(frames)):
        p = directory / f"{prefix}_{i:04d}.png"
        Image.fromarray(img).save(p)
        paths.append(p)
    return paths
