"""Command line: ``anchordiff {gen-data,train,generate,evaluate,ablate}``.

Exit status is 0 on success, 2 for usage, configuration or input errors and 1
for anything unexpected.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, load_config
from .diffusion import build_schedule
from .errors import AnchorDiffError, ConfigurationError, ValidationError
from .metrics import csim, detect_video_points, expressive_lmse, lmse, self_csim
from .model import SDiT, load_checkpoint, save_checkpoint
from .studies import STRATEGIES, VARIANTS, generate_video, guidance_ablation, self_reenactment_inputs
from .synthetic import dump_pngs, generate_clip, load_clip, random_scene, save_clip
from .training import cosine_rate, init_state, make_clips, run_steps

log = logging.getLogger("anchordiff")

METRICS = ("csim", "self_csim", "lmse", "expressive_lmse")
LOSS_HEADER = ["step", "loss", "lr"]
METRIC_HEADER = ["metric", "value"]
ABLATION_HEADER = ["bin", "t_lo", "t_hi", "variant", "mse", "ratio"]


class UsageError(AnchorDiffError):
    """Bad arguments or inputs; exits with status 2."""


def _set_deterministic(on: bool) -> None:
    if on:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace("run", seed=args.seed)
    return cfg


# -- gen-data ---------------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    cfg = _config(args)
    data = cfg.data if args.count is None else cfg.replace("data", num_clips=args.count).data
    if args.frames is not None:
        data = cfg.replace("data", num_clips=data.num_clips, clip_frames=args.frames).data
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if data.num_clips == 0:
        return
    clips = make_clips(data, cfg.model.image_size, cfg.model.patch_size)
    lines = []
    for i, clip in enumerate(clips):
        name = f"clip_{i:05d}.avd"
        save_clip(clip, out / name)
        n, h, w, c = clip.frames.shape
        lines.append(f"{name} {n} {h} {w} {c} {clip.spec.shape_kind.name.lower()}")
        if args.png:
            dump_pngs(clip.frames, out / "png", prefix=f"clip_{i:05d}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _load_dataset(directory: Path) -> list:
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise UsageError(f"{directory} has no manifest.txt")
    names = [ln.split()[0] for ln in manifest.read_text().splitlines() if ln.strip()]
    if not names:
        raise UsageError(f"{directory} lists no clips")
    return [load_clip(directory / n) for n in names]


# -- train --------------------------------------------------------------------------------

def cmd_train(args) -> None:
    cfg = _config(args)
    if args.steps is not None:
        cfg = cfg.replace("train", steps=args.steps)
    out = Path(args.out or Path(cfg.run.out_dir) / "model.sdt")
    out.parent.mkdir(parents=True, exist_ok=True)
    loss_path = Path(args.loss_csv or out.with_suffix(".losses.csv"))
    clips = _load_dataset(Path(args.data)) if args.data else make_clips(cfg.data, cfg.model.image_size, cfg.model.patch_size)

    model = None
    done = 0
    if args.resume:
        model = load_checkpoint(args.resume)
        if model.cfg != cfg.model:
            raise UsageError("checkpoint model config differs from the run config")
        done = model.trained_steps
    # resumed runs reseed from (seed, steps done); optimiser moments restart from zero
    seed = cfg.run.seed if done == 0 else cfg.run.seed * 1_000_003 + done
    state = init_state(cfg.model, cfg.train, seed, model=model)
    # fast-forward the cosine schedule to where the checkpoint stopped
    for group in state.optimizer.param_groups:
        group["lr"] = cosine_rate(done, cfg.train.steps, group["initial_lr"])
    state.scheduler.last_epoch = done
    state.step = done
    remaining = max(cfg.train.steps - done, 0)

    mode = "a" if done and loss_path.exists() else "w"
    with loss_path.open(mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOSS_HEADER)
        run_steps(state, clips, cfg.train, remaining, on_step=lambda s, l, r: writer.writerow([s, repr(l), repr(r)]))
    save_checkpoint(state.model, out)
    cfg.save(out.with_suffix(".config.txt"))


# -- generate -----------------------------------------------------------------------------

def cmd_generate(args) -> None:
    model = load_checkpoint(args.checkpoint)
    clip = load_clip(args.clip)
    n = args.frames if args.frames is not None else clip.num_frames - 1
    cfg = model.cfg
    G, L, _ = self_reenactment_inputs(clip, n)
    sched = build_schedule(cfg.t_max, args.beta_start, args.beta_end)
    gen = torch.Generator().manual_seed(args.seed if args.seed is not None else 0)
    shape = (cfg.image_size, cfg.image_size, cfg.channels)
    video, rows = generate_video(
        model, args.strategy, G, L, sched, gen, shape, cfg.frames_per_sequence,
        overlap=args.overlap, return_rows=True, workers=1 if args.deterministic else args.workers,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "frames.npy", video.numpy().astype(np.float32))
    if rows is not None:
        np.save(out / "rows.npy", rows.numpy().astype(np.float32))
    if args.png:
        dump_pngs(video.numpy(), out / "png")


# -- evaluate -----------------------------------------------------------------------------

def evaluate_video(generated: np.ndarray, clip, metrics=METRICS) -> dict[str, float]:
    """Self-reenactment metrics: driving frames are the clip's first frames, the source its last."""
    n = len(generated)
    if clip.num_frames < n + 1:
        raise UsageError(f"driving clip has {clip.num_frames} frames, need {n + 1}")
    driving = clip.frames[:n]
    source = clip.frames[-1]
    out = {}
    for m in metrics:
        if m == "csim":
            out[m] = csim(source, generated)
        elif m == "self_csim":
            out[m] = self_csim(generated, driving)
        elif m in ("lmse", "expressive_lmse"):
            pts = detect_video_points(generated, clip.spec)
            fn = lmse if m == "lmse" else expressive_lmse
            out[m] = fn(pts, clip.control_points[:n])
        else:
            raise UsageError(f"unknown metric {m!r}; choose from {METRICS}")
    return out


def cmd_evaluate(args) -> None:
    generated = np.load(args.generated)
    if generated.ndim != 4:
        raise UsageError(f"generated frames must be [N, H, W, C], got {generated.shape}")
    clip = load_clip(args.driving)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    values = evaluate_video(generated, clip, metrics)
    with _open_out(args.out) as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_HEADER)
        for k, v in values.items():
            writer.writerow([k, repr(v)])


def _open_out(path):
    if path in (None, "-"):
        return _Stdout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline="")


class _Stdout:
    def __enter__(self):
        return sys.stdout

    def __exit__(self, *exc):
        sys.stdout.flush()


# -- ablate ----------------------------------------------------------------------------------

def cmd_ablate(args) -> None:
    cfg = _config(args)
    clips = make_clips(cfg.data, cfg.model.image_size, cfg.model.patch_size)
    models: dict[str, SDiT] = {}
    for v in VARIANTS:
        path = Path(args.models) / f"{v}.sdt" if args.models else None
        if path is not None and path.exists():
            models[v] = load_checkpoint(path)
            continue
        vcfg = cfg.replace("model", guidance=v)
        state = init_state(vcfg.model, vcfg.train, vcfg.run.seed)
        run_steps(state, clips, vcfg.train, vcfg.train.steps)
        models[v] = state.model
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(state.model, path)
    eval_clips = [
        generate_clip(random_scene(np.random.default_rng(cfg.run.seed + 10_000 + i)), cfg.data.clip_frames,
                      cfg.model.image_size, cfg.model.image_size, cfg.model.patch_size)
        for i in range(args.eval_clips)
    ]
    sched = build_schedule(cfg.model.t_max, cfg.train.beta_start, cfg.train.beta_end)
    rows = guidance_ablation(models, eval_clips, args.bins, args.per_bin, cfg.run.seed, sched)
    with _open_out(args.out) as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATION_HEADER)
        for r in rows:
            writer.writerow([r.bin_index, r.t_lo, r.t_hi, r.variant, repr(r.mse), repr(r.ratio)])


# -- entry point -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'section.key = value' run config")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--deterministic", action="store_true", help="single thread, deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="anchordiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic clips")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, help="overrides data.num_clips")
    g.add_argument("--frames", type=int, help="overrides data.clip_frames")
    g.add_argument("--png", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", help="dataset directory from gen-data (default: generate from config)")
    t.add_argument("--out", help="checkpoint path (default: run.out_dir/model.sdt)")
    t.add_argument("--loss-csv")
    t.add_argument("--steps", type=int, help="overrides train.steps (total, including resumed steps)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("generate", parents=[common], help="self-reenactment video from a driving clip")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--clip", required=True, help="driving clip (.avd)")
    r.add_argument("--strategy", choices=STRATEGIES, default="anchored")
    r.add_argument("--frames", type=int, help="output length (default: clip length - 1)")
    r.add_argument("--overlap", type=int, default=1)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--beta-start", type=float)
    r.add_argument("--beta-end", type=float)
    r.add_argument("--out", required=True)
    r.add_argument("--png", action="store_true")
    r.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", parents=[common], help="metrics CSV for a generated video")
    e.add_argument("--generated", required=True, help="frames.npy from generate")
    e.add_argument("--driving", required=True, help="driving clip (.avd)")
    e.add_argument("--metrics", default=",".join(METRICS))
    e.add_argument("--out", help="CSV path (default: stdout)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", parents=[common], help="guidance ablation ratio CSV")
    a.add_argument("--models", help="directory of <variant>.sdt checkpoints, reused or written")
    a.add_argument("--bins", type=int, default=10)
    a.add_argument("--per-bin", type=int, default=64)
    a.add_argument("--eval-clips", type=int, default=16)
    a.add_argument("--out", help="CSV path (default: stdout)")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    _set_deterministic(args.deterministic)
    try:
        args.func(args)
    except (UsageError, ConfigurationError, ValidationError, ValueError, FileNotFoundError) as exc:
        print(f"anchordiff: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("internal error", exc_info=True)
        print(f"anchordiff: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
