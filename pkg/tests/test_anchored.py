import numpy as np
import pytest
import torch

from _oracles import perturb
from anchordiff.anchored import (
    anchored_generate,
    average_windows,
    coverage_multiset,
    expected_multiset,
    multidiffusion_generate,
    override_anchor_tokens,
    plain_generate,
    plan_anchored_batch,
    plan_windows,
    reorder_frames,
    scatter_frames,
    valid_anchored_lengths,
    valid_window_lengths,
    windowed_generate,
)
from anchordiff.diffusion import build_schedule, sampler_step
from anchordiff.errors import PlanningError, ValidationError
from anchordiff.model import SDiT
from test_model import TINY

SHAPE = (2, 2, 1)


class MixingDenoiser:
    """Test double: one token per frame, two "blocks" that mix information across slots."""

    def __init__(self, depth=2):
        self.depth = depth

    def __call__(self, x, t, G, L, hook=None):
        B, T = x.shape[:2]
        h = x.reshape(B, T, -1).clone()
        for i in range(self.depth):
            mean = h.mean(dim=1, keepdim=True)
            h = 0.8 * h + 0.3 * torch.tanh(mean) + 0.01 * L[..., :1] + 0.001 * t.reshape(B, 1, 1) + 0.01 * G[:, None, :1]
            h = h.reshape(B, T, h.shape[-1])
            if hook is not None:
                out = hook(i, h.view(B, T, -1))
                h = h if out is None else out
        return h.reshape(x.shape)


def valid_triples(max_n=64):
    for N in range(3, max_n + 1):
        for T in range(3, N + 1):
            if (N - 1) % (T - 1) == 0:
                yield N, T, (N - 1) // (T - 1)


# -- planning ---------------------------------------------------------------------------

def test_plan_example():
    plan = plan_anchored_batch(5, 3, 2)
    assert plan.anchor_index == 2 and plan.anchor_slot == 1
    assert plan.sequences.tolist() == [[0, 2, 3], [1, 2, 4]]


def test_plan_rejects_bad_sizes():
    with pytest.raises(PlanningError):
        plan_anchored_batch(6, 3, 2)
    with pytest.raises(PlanningError):
        plan_anchored_batch(3, 2, 2)


def test_plan_invariants_exhaustive():
    count = 0
    for N, T, B in valid_triples():
        for seed in (None, N):
            plan = plan_anchored_batch(N, T, B, shuffle_seed=seed)
            seq = plan.sequences
            assert seq.shape == (B, T)
            assert np.all(np.diff(seq, axis=1) > 0)
            assert np.all(seq[:, T // 2] == plan.anchor_index)
            assert coverage_multiset(plan) == expected_multiset(N, plan.anchor_index, B)
            count += 1
    assert count > 100


def test_valid_lengths():
    assert valid_anchored_lengths(4, 13) == [4, 7, 10, 13]
    assert valid_window_lengths(4, 1, 13) == [4, 7, 10, 13]


# -- override, scatter, reorder -------------------------------------------------------------

def test_override_locality_and_idempotence():
    for N, T, B in valid_triples(40):
        slot = T // 2
        x = torch.randn(B, T, 3, generator=torch.Generator().manual_seed(N * 100 + T))
        before = x.clone()
        override_anchor_tokens(x, slot)
        keep = torch.ones(B, T, dtype=torch.bool)
        keep[1:, slot] = False
        assert torch.equal(x[keep], before[keep])
        assert all(torch.equal(x[b, slot], before[0, slot]) for b in range(B))
        again = override_anchor_tokens(x.clone(), slot)
        assert torch.equal(again, x)


def test_override_slot_validation():
    with pytest.raises(ValidationError):
        override_anchor_tokens(torch.zeros(2, 3, 4), 3)


def test_scatter_reorder_roundtrip_exhaustive():
    for N, T, B in valid_triples():
        plan = plan_anchored_batch(N, T, B)
        video = torch.randn(N, 2, generator=torch.Generator().manual_seed(N))
        assert torch.equal(reorder_frames(scatter_frames(video, plan), plan), video)


def test_reorder_takes_anchor_from_row_zero():
    plan = plan_anchored_batch(7, 3, 3)
    rows = torch.arange(9.0).reshape(3, 3)
    rows[1:, 1] = -1.0
    out = reorder_frames(rows, plan)
    assert out[plan.anchor_index].item() == rows[0, 1].item()


def test_reorder_shape_validation():
    plan = plan_anchored_batch(5, 3, 2)
    with pytest.raises(ValidationError):
        reorder_frames(torch.zeros(3, 3), plan)


# -- anchored generation ----------------------------------------------------------------------

def reference_anchored(model, plan, G, L, sched, gen, shape):
    """Loop-level restatement: copy anchor slot from row 0 after every block, eps and step."""
    B, T, slot = plan.B, plan.T, plan.anchor_slot

    def share(v):
        for b in range(1, B):
            v[b, slot] = v[0, slot].clone()
        return v

    def hook(_i, h):
        return share(h.clone())

    x = share(torch.randn((B, T, *shape), generator=gen, dtype=L.dtype))
    Gb = G.reshape(1, -1).repeat(B, 1)
    for t in range(sched.t_max - 1, -1, -1):
        eps = share(model(x, torch.full((B,), t), Gb, L, hook=hook).clone())
        x = share(sampler_step(x, eps, t, sched, gen))
    video = torch.empty((plan.N, *shape), dtype=x.dtype)
    for b in range(B - 1, -1, -1):  # row 0 written last so it wins for the anchor
        for s in range(T):
            video[plan.sequences[b, s]] = x[b, s]
    return video


def test_anchored_matches_reference_loop():
    sched = build_schedule(8)
    model = MixingDenoiser()
    for N, T, B in [(7, 3, 3), (13, 4, 4), (9, 5, 2)]:
        plan = plan_anchored_batch(N, T, B)
        g = torch.Generator().manual_seed(1)
        signals = torch.rand(N, 4, generator=g, dtype=torch.float64)
        G = torch.rand(5, generator=g, dtype=torch.float64)
        L = scatter_frames(signals, plan)
        got = anchored_generate(model, plan, G, L, sched, torch.Generator().manual_seed(2), SHAPE)
        ref = reference_anchored(model, plan, G, L, sched, torch.Generator().manual_seed(2), SHAPE)
        assert torch.allclose(got, ref, rtol=0, atol=1e-12)


def test_anchor_identical_across_rows():
    model = perturb(SDiT(TINY), 0.1, 0)
    plan = plan_anchored_batch(7, 3, 3)
    g = torch.Generator().manual_seed(0)
    L = torch.rand(3, 3, TINY.local_dim, generator=g)
    G = torch.randn(TINY.global_dim, generator=g)
    _, rows = anchored_generate(model, plan, G, L, build_schedule(10), g, (4, 4, 3), return_rows=True)
    for b in range(1, 3):
        assert torch.equal(rows[b, 1], rows[0, 1])


def test_single_row_equals_plain_sampling():
    sched = build_schedule(6)
    for T in range(3, 65):
        plan = plan_anchored_batch(T, T, 1)
        g = torch.Generator().manual_seed(T)
        L = torch.rand(T, 4, generator=g, dtype=torch.float64)
        G = torch.rand(5, generator=g, dtype=torch.float64)
        a = anchored_generate(MixingDenoiser(), plan, G, L[None], sched, torch.Generator().manual_seed(0), SHAPE)
        p = plain_generate(MixingDenoiser(), G, L, sched, torch.Generator().manual_seed(0), SHAPE)
        assert a.numpy().tobytes() == p.numpy().tobytes()


def test_single_row_equals_plain_sampling_real_model():
    model = perturb(SDiT(TINY), 0.1, 0)
    g = torch.Generator().manual_seed(0)
    L = torch.rand(3, TINY.local_dim, generator=g)
    G = torch.randn(TINY.global_dim, generator=g)
    sched = build_schedule(10)
    plan = plan_anchored_batch(3, 3, 1)
    a = anchored_generate(model, plan, G, L[None], sched, torch.Generator().manual_seed(4), (4, 4, 3))
    p = plain_generate(model, G, L, sched, torch.Generator().manual_seed(4), (4, 4, 3))
    assert a.numpy().tobytes() == p.numpy().tobytes()


def test_threaded_rows_match_single_thread():
    model = perturb(SDiT(TINY).double(), 0.1, 0)
    plan = plan_anchored_batch(9, 3, 4)
    g = torch.Generator().manual_seed(0)
    L = torch.rand(4, 3, TINY.local_dim, generator=g, dtype=torch.float64)
    G = torch.randn(TINY.global_dim, generator=g, dtype=torch.float64)
    sched = build_schedule(6)
    ref = anchored_generate(model, plan, G, L, sched, torch.Generator().manual_seed(1), (4, 4, 3))
    for workers in (2, 3):
        got = anchored_generate(model, plan, G, L, sched, torch.Generator().manual_seed(1), (4, 4, 3), workers=workers)
        assert torch.allclose(got, ref, rtol=0, atol=1e-12)


# -- window averaging baseline ------------------------------------------------------------------

def test_plan_windows():
    assert plan_windows(7, 4, 1).tolist() == [[0, 1, 2, 3], [3, 4, 5, 6]]
    with pytest.raises(PlanningError):
        plan_windows(8, 4, 1)
    with pytest.raises(PlanningError):
        plan_windows(8, 4, 4)


def test_average_windows_loop_oracle():
    windows = plan_windows(10, 4, 2)
    xw = torch.randn(len(windows), 4, 3, dtype=torch.float64)
    got = average_windows(xw, windows, 10)
    for g in range(10):
        vals = [xw[w, s] for w in range(len(windows)) for s in range(4) if windows[w, s] == g]
        assert torch.allclose(got[g], sum(vals) / len(vals), atol=1e-15)


def test_single_window_equals_plain_sampling():
    sched = build_schedule(6)
    g = torch.Generator().manual_seed(0)
    L = torch.rand(4, 4, generator=g, dtype=torch.float64)
    G = torch.rand(5, generator=g, dtype=torch.float64)
    m = multidiffusion_generate(MixingDenoiser(), 4, 4, 1, G, L, sched, torch.Generator().manual_seed(3), SHAPE)
    p = plain_generate(MixingDenoiser(), G, L, sched, torch.Generator().manual_seed(3), SHAPE)
    assert m.numpy().tobytes() == p.numpy().tobytes()


def test_identical_windows_reference_loop():
    # two windows over the same frames: averaging identical copies is the identity up to rounding
    sched = build_schedule(6)
    windows = np.array([[0, 1, 2], [0, 1, 2]])
    g = torch.Generator().manual_seed(0)
    L = torch.rand(3, 4, generator=g, dtype=torch.float64)
    G = torch.rand(5, generator=g, dtype=torch.float64)
    got = windowed_generate(MixingDenoiser(), windows, 3, G, L, sched, torch.Generator().manual_seed(5), SHAPE)

    gen = torch.Generator().manual_seed(5)
    x = torch.randn((1, 3, *SHAPE), generator=gen, dtype=torch.float64)[0]
    Gb = G.reshape(1, -1).repeat(2, 1)
    for t in range(sched.t_max - 1, -1, -1):
        xw = torch.stack([x, x])
        eps = MixingDenoiser()(xw, torch.full((2,), t), Gb, L[None].repeat(2, 1, 1))
        xw = sampler_step(xw, eps, t, sched, gen)
        x = (xw[0] + xw[1]) / 2
    assert torch.allclose(got, x, rtol=0, atol=1e-12)


def test_multidiffusion_signal_count_validation():
    with pytest.raises(ValidationError):
        multidiffusion_generate(MixingDenoiser(), 7, 4, 1, torch.zeros(5), torch.zeros(6, 4), build_schedule(4),
                                torch.Generator(), SHAPE)
