"""Long-video inference: anchored batches of non-uniform sequences, and the
overlapping-window averaging baseline.

Models are called as ``model(x, t, G, L, hook=None)`` with ``x`` of shape
[B, T, H, W, C]; anything with that signature (including test doubles) works.
"""

from __future__ import annotations

import dataclasses
import threading

import numpy as np
import torch

from .diffusion import DiffusionSchedule, sample_sequence, sampler_step
from .errors import PlanningError, ValidationError
from .model import split_prediction


@dataclasses.dataclass(frozen=True)
class AnchoredBatchPlan:
    B: int
    T: int
    N: int
    anchor_index: int
    anchor_slot: int
    sequences: np.ndarray  # [B, T] global frame indices

    def positions(self) -> dict[int, tuple[int, int]]:
        """First (row, slot) holding each global frame index."""
        pos: dict[int, tuple[int, int]] = {}
        for b in range(self.B):
            for s in range(self.T):
                pos.setdefault(int(self.sequences[b, s]), (b, s))
        return pos


def plan_anchored_batch(N: int, T: int, B: int, shuffle_seed: int | None = None) -> AnchoredBatchPlan:
    """Split frames 0..N-1 into B rows of T frames that all share one anchor frame.

    Non-anchor frames are sorted and dealt round-robin to the rows (or after a
    seeded shuffle when ``shuffle_seed`` is given), the anchor is inserted and
    each row sorted. The anchor sits at slot ``T // 2`` of every row, so it must
    be the frame with exactly ``B * (T // 2)`` frames before it; for odd T this
    is the central frame ``N // 2``.
    """
    if T < 3 or B < 1:
        raise PlanningError(f"need T >= 3 and B >= 1, got T={T}, B={B}")
    if N != B * (T - 1) + 1:
        raise PlanningError(f"N={N} does not equal B*(T-1)+1={B * (T - 1) + 1}")
    slot = T // 2
    anchor = B * slot
    below = np.arange(anchor)
    above = np.arange(anchor + 1, N)
    if shuffle_seed is not None:
        rng = np.random.default_rng(shuffle_seed)
        below = rng.permutation(below)
        above = rng.permutation(above)
    # dealing "below" and "above" separately keeps slot counts exact even after shuffling
    rows = [
        np.sort(np.concatenate([below[b::B], [anchor], above[b::B]])) for b in range(B)
    ]
    seqs = np.stack(rows).astype(np.int64)
    assert np.all(seqs[:, slot] == anchor)
    return AnchoredBatchPlan(B, T, N, int(anchor), slot, seqs)


def valid_anchored_lengths(T: int, max_n: int) -> list[int]:
    return [b * (T - 1) + 1 for b in range(1, max_n) if b * (T - 1) + 1 <= max_n]


def override_anchor_tokens(batch: torch.Tensor, anchor_slot: int) -> torch.Tensor:
    """Copy row 0's slot ``anchor_slot`` into every other row, in place; returns ``batch``.

    ``batch`` is [B, T, ...] (tokens, noise predictions or frames alike).
    """
    if batch.ndim < 2 or not 0 <= anchor_slot < batch.shape[1]:
        raise ValidationError(f"anchor slot {anchor_slot} out of range for shape {tuple(batch.shape)}")
    if batch.shape[0] > 1:
        batch[1:, anchor_slot] = batch[0, anchor_slot]
    return batch


def anchor_hook(T: int, anchor_slot: int):
    """Block hook applying the override to a flattened [B, T*Np, D] token state."""

    def hook(_block: int, tokens: torch.Tensor):
        B, N, D = tokens.shape
        override_anchor_tokens(tokens.view(B, T, N // T, D), anchor_slot)
        return tokens

    return hook


def scatter_frames(video: np.ndarray | torch.Tensor, plan: AnchoredBatchPlan):
    """[N, ...] chronological frames (or signals) -> [B, T, ...] rows of the plan."""
    return video[plan.sequences]


def reorder_frames(rows: torch.Tensor | np.ndarray, plan: AnchoredBatchPlan):
    """[B, T, ...] generated rows -> [N, ...] chronological video; the anchor comes from row 0."""
    if tuple(rows.shape[:2]) != (plan.B, plan.T):
        raise ValidationError(f"rows {tuple(rows.shape[:2])} do not match plan {(plan.B, plan.T)}")
    pos = plan.positions()
    if sorted(pos) != list(range(plan.N)):
        raise RuntimeError("plan does not cover every frame exactly")
    if pos[plan.anchor_index][0] != 0:
        raise RuntimeError("anchor missing from row 0")
    bs = np.array([pos[g][0] for g in range(plan.N)])
    ss = np.array([pos[g][1] for g in range(plan.N)])
    return rows[bs, ss]


def _rows_forward_threaded(model, x, t, G, L, anchor_slot, workers):
    """Forward pass with rows split across threads and a barrier at each block boundary."""
    B, T = x.shape[:2]
    chunks = [c for c in np.array_split(np.arange(B), workers) if len(c)]
    barrier = threading.Barrier(len(chunks))
    shared: dict[str, torch.Tensor] = {}
    outputs: list = [None] * len(chunks)
    errors: list = []

    def run(ci: int, rows: np.ndarray):
        try:
            idx = torch.as_tensor(rows)
            c = model.conditioning(t[idx], G[idx], L[idx])
            h = model.embed(x[idx])
            n, ntok, d = h.shape
            for blk in model.blocks:
                h = blk(h, c, T)
                hv = h.view(n, T, ntok // T, d)
                if ci == 0:
                    shared["anchor"] = hv[0, anchor_slot].clone()
                barrier.wait()
                if ci == 0:
                    override_anchor_tokens(hv, anchor_slot)
                else:
                    hv[:, anchor_slot] = shared["anchor"]
                # nobody may publish the next block's anchor before all rows copied this one
                barrier.wait()
            outputs[ci] = model.head(h, c)
        except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
            errors.append(exc)
            barrier.abort()

    threads = [threading.Thread(target=run, args=(ci, rows)) for ci, rows in enumerate(chunks)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    return torch.cat(outputs, dim=0)


@torch.no_grad()
def anchored_generate(
    model,
    plan: AnchoredBatchPlan,
    G: torch.Tensor,
    local_signals: torch.Tensor,
    sched: DiffusionSchedule,
    generator: torch.Generator,
    image_shape: tuple[int, int, int],
    workers: int = 1,
    return_rows: bool = False,
):
    """Reverse diffusion of all plan rows with the anchor shared across rows.

    ``G`` is the source global signal [d_G]; ``local_signals`` is [B, T, d_L]
    (use :func:`scatter_frames` on per-frame signals). The anchor is overridden
    after every transformer block, on the predicted noise and on each sampled
    state. Returns the [N, H, W, C] video, plus the raw [B, T, H, W, C] rows
    when ``return_rows`` is set.
    """
    B, T, slot = plan.B, plan.T, plan.anchor_slot
    L = torch.as_tensor(local_signals)
    if tuple(L.shape[:2]) != (B, T):
        raise ValidationError(f"local signals {tuple(L.shape[:2])} do not match plan {(B, T)}")
    G = torch.as_tensor(G, dtype=L.dtype)
    Gb = G.reshape(1, -1).expand(B, -1) if G.ndim == 1 else G
    channels = image_shape[-1]
    hook = anchor_hook(T, slot)
    x = torch.randn((B, T, *image_shape), generator=generator, dtype=L.dtype)
    override_anchor_tokens(x, slot)
    for t in reversed(range(sched.t_max)):
        tt = torch.full((B,), t)
        if workers > 1:
            out = _rows_forward_threaded(model, x, tt, Gb, L, slot, workers)
        else:
            out = model(x, tt, Gb, L, hook=hook)
        eps, _ = split_prediction(out, channels)
        eps = override_anchor_tokens(eps.contiguous(), slot)
        x = override_anchor_tokens(sampler_step(x, eps, t, sched, generator), slot)
    video = reorder_frames(x, plan)
    return (video, x) if return_rows else video


# -- overlapping-window averaging baseline ------------------------------------

def plan_windows(N: int, window: int, overlap: int) -> np.ndarray:
    """[W, window] frame indices of windows starting every ``window - overlap`` frames."""
    if not 0 < overlap < window:
        raise PlanningError(f"need 0 < overlap < window, got overlap={overlap}, window={window}")
    stride = window - overlap
    if N < window or (N - window) % stride:
        raise PlanningError(f"N={N} cannot be tiled by windows of {window} with stride {stride}")
    starts = np.arange(0, N - window + 1, stride)
    return starts[:, None] + np.arange(window)[None, :]


def valid_window_lengths(window: int, overlap: int, max_n: int) -> list[int]:
    stride = window - overlap
    return list(range(window, max_n + 1, stride))


def average_windows(xw: torch.Tensor, windows: np.ndarray, N: int) -> torch.Tensor:
    """Per-frame mean over every window covering it; fixed accumulation order."""
    value = torch.zeros((N, *xw.shape[2:]), dtype=xw.dtype)
    count = torch.zeros(N, dtype=xw.dtype)
    for w, idx in enumerate(windows):
        for s, g in enumerate(idx):
            value[g] += xw[w, s]
            count[g] += 1
    if torch.any(count == 0):
        raise PlanningError("windows leave frames uncovered")
    return value / count.reshape(-1, *([1] * (value.ndim - 1)))


@torch.no_grad()
def windowed_generate(
    model,
    windows: np.ndarray,
    N: int,
    G: torch.Tensor,
    frame_signals: torch.Tensor,
    sched: DiffusionSchedule,
    generator: torch.Generator,
    image_shape: tuple[int, int, int],
) -> torch.Tensor:
    """Denoise all windows jointly, averaging shared frames after every step."""
    frame_signals = torch.as_tensor(frame_signals)
    windows = np.asarray(windows)
    W = windows.shape[0]
    G = torch.as_tensor(G, dtype=frame_signals.dtype)
    Gb = G.reshape(1, -1).expand(W, -1)
    L = frame_signals[torch.as_tensor(windows)]
    channels = image_shape[-1]
    xg = torch.randn((1, N, *image_shape), generator=generator, dtype=frame_signals.dtype)[0]
    xw = xg[torch.as_tensor(windows)]
    for t in reversed(range(sched.t_max)):
        eps, _ = split_prediction(model(xw, torch.full((W,), t), Gb, L), channels)
        xw = sampler_step(xw, eps, t, sched, generator)
        xg = average_windows(xw, windows, N)
        xw = xg[torch.as_tensor(windows)]
    return average_windows(xw, windows, N)


def multidiffusion_generate(
    model,
    N: int,
    window: int,
    overlap: int,
    G: torch.Tensor,
    frame_signals: torch.Tensor,
    sched: DiffusionSchedule,
    generator: torch.Generator,
    image_shape: tuple[int, int, int],
) -> torch.Tensor:
    """``frame_signals`` is [N, d_L] (one local signal per output frame)."""
    windows = plan_windows(N, window, overlap)
    if len(frame_signals) != N:
        raise ValidationError(f"need {N} frame signals, got {len(frame_signals)}")
    return windowed_generate(model, windows, N, G, frame_signals, sched, generator, image_shape)


def plain_generate(model, G, frame_signals, sched, generator, image_shape) -> torch.Tensor:
    """Single sequence covering all frames; [N, H, W, C]."""
    L = torch.as_tensor(frame_signals)[None]
    G = torch.as_tensor(G, dtype=L.dtype).reshape(1, -1)
    return sample_sequence(model, G, L, sched, generator, image_shape)[0]


def coverage_multiset(plan: AnchoredBatchPlan) -> list[int]:
    return sorted(int(v) for v in plan.sequences.ravel())


def expected_multiset(N: int, anchor: int, B: int) -> list[int]:
    return sorted(list(range(N)) + [anchor] * (B - 1))
