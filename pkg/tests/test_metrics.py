import numpy as np
import pytest

from _oracles import csim_loop, embed_loop, lmse_loop, min_pairwise_loop
from anchordiff.errors import ValidationError
from anchordiff.metrics import (
    DegenerateFrameError,
    EmbeddingConfig,
    EmbeddingMethod,
    csim,
    detect_control_points,
    embed_frame,
    expressive_lmse,
    lmse,
    min_pairwise_cosine,
    self_csim,
)
from anchordiff.synthetic import EXPRESSIVE_INDICES, ShapeKind, generate_clip, random_scene

PROJ = EmbeddingConfig(EmbeddingMethod.FIXED_RANDOM_PROJECTION, output_dim=6, seed=3, grid=2)


def _proj_matrix(cfg, in_dim):
    rng = np.random.default_rng(cfg.seed)
    return (rng.standard_normal((cfg.output_dim, in_dim)) / np.sqrt(in_dim)).tolist()


def test_embedding_is_unit_norm():
    f = np.random.default_rng(0).uniform(-1, 1, (16, 16, 3))
    for cfg in (EmbeddingConfig(), PROJ):
        assert np.linalg.norm(embed_frame(f, cfg)) == pytest.approx(1.0, abs=1e-12)


def test_degenerate_and_bad_grid():
    with pytest.raises(DegenerateFrameError):
        embed_frame(np.zeros((8, 8, 3)))
    with pytest.raises(ValidationError):
        embed_frame(np.ones((12, 12, 3)))


def test_identical_video():
    f = np.random.default_rng(1).uniform(-1, 1, (8, 8, 3))
    video = np.stack([f] * 4)
    assert csim(f, video) == pytest.approx(1.0, abs=1e-12)
    assert self_csim(video, video) == 0.0


def test_noise_lowers_csim():
    rng = np.random.default_rng(2)
    clip = generate_clip(random_scene(rng), 6, 16, 16)
    base = csim(clip.frames[0], clip.frames)
    noisy = clip.frames + rng.normal(0, 0.5, clip.frames.shape)
    assert csim(clip.frames[0], noisy) < base


def test_metrics_match_scalar_loops():
    rng = np.random.default_rng(0)
    for trial in range(100):
        n, h = int(rng.integers(2, 5)), int(rng.choice([2, 4]))
        video = rng.uniform(-1, 1, (n, h, h, 2))
        driving = rng.uniform(-1, 1, (n, h, h, 2))
        src = rng.uniform(-1, 1, (h, h, 2))
        cfg = EmbeddingConfig(grid=2) if trial % 2 == 0 else PROJ
        proj = None if trial % 2 == 0 else _proj_matrix(PROJ, 2 * 2 * 2)
        assert np.allclose(embed_frame(src, cfg), embed_loop(src, 2, proj), rtol=0, atol=1e-9)
        assert csim(src, video, cfg) == pytest.approx(csim_loop(src, video, 2, proj), abs=1e-9)
        for ref, first in (("all", False), ("first", True)):
            want = abs(min_pairwise_loop(video, 2, proj, first) - min_pairwise_loop(driving, 2, proj, first))
            assert self_csim(video, driving, cfg, ref) == pytest.approx(want, abs=1e-9)
        a, b = rng.random((n, 8, 2)), rng.random((n, 8, 2))
        assert lmse(a, b) == pytest.approx(lmse_loop(a, b), abs=1e-9)
        assert expressive_lmse(a, b) == pytest.approx(lmse_loop(a, b, EXPRESSIVE_INDICES), abs=1e-9)


def test_self_csim_validation():
    with pytest.raises(ValidationError):
        self_csim(np.ones((3, 8, 8, 3)), np.ones((2, 8, 8, 3)))
    with pytest.raises(ValidationError):
        min_pairwise_cosine(np.ones((3, 8, 8, 3)), reference="middle")


def test_lmse_examples():
    a = np.zeros((1, 2, 2))
    b = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    assert lmse(a, b) == 0.5
    assert lmse(a, b, [0]) == 0.5
    with pytest.raises(ValidationError):
        lmse(a, b[:, :1])


@pytest.mark.parametrize("kind", list(ShapeKind))
def test_detector_recovers_points(kind):
    rng = np.random.default_rng(4)
    for _ in range(5):
        spec = random_scene(rng)
        spec = type(spec)(**{**spec.__dict__, "shape_kind": kind})
        clip = generate_clip(spec, 6, 32, 32)
        for f, cp in zip(clip.frames, clip.control_points):
            err = np.abs(detect_control_points(f, spec) - cp).max()
            assert err < 0.5 / 32
