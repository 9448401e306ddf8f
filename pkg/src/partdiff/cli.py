"""Command-line entry point: ``partdiff {train,sample,analyze,eval,toygen}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, data
from .persistence import Checkpoint, RunConfig, load_checkpoint, load_config, save_checkpoint
from .sampler import sample_full, sample_partial, Trajectory
from .schedule import (
    NoiseSchedule,
    build_linear_schedule,
    cutoff_step_for_threshold,
    parse_schedule,
    transfer_cutoff,
)
from .training import train

log = logging.getLogger("partdiff")

CHECKPOINT_NAME = "checkpoint.pdif"
LOSS_LOG_NAME = "loss.log"


class CliError(Exception):
    pass


def load_dataset(cfg: RunConfig, train_mode: bool = True) -> list[data.ImagePair]:
    if cfg.data == "toy":
        return data.toy_dataset(cfg.toy_n, cfg.crop, cfg.upsample_factor, cfg.toy_seed, cfg.image_channels)
    rng = np.random.default_rng(cfg.seed) if train_mode else None
    return data.load_pairs(cfg.data, cfg.upsample_factor, cfg.crop, rng, train_mode, cfg.image_channels)


def inference_schedule(cfg: RunConfig, steps: int | None) -> NoiseSchedule:
    sched = parse_schedule(cfg.inference_schedule)
    if steps is None or steps == sched.T:
        return sched
    return build_linear_schedule(float(sched.betas[0]), float(sched.betas[-1]), steps)


def resolve_cutoff(cfg: RunConfig, sched: NoiseSchedule, cutoff, threshold) -> int | None:
    """Cutoff K from the command line, falling back to the config; None means full sampling."""
    if cutoff is None and threshold is None:
        cutoff, threshold = cfg.cutoff, cfg.threshold
    if threshold is not None:
        k = cutoff_step_for_threshold(sched, threshold)
        if k < 1:
            raise CliError(f"threshold {threshold} is above every noise scale of the schedule")
        return k
    if cutoff is not None and not (1 <= cutoff <= sched.T):
        raise CliError(f"cutoff {cutoff} outside [1, {sched.T}]")
    return cutoff


def _sample(model, lr, sched, k, seed, factor, trajectory=None):
    rng = np.random.default_rng(seed)
    if k is None:
        return sample_full(model, lr, sched, rng, factor, trajectory)
    return sample_partial(model, lr, sched, k, rng, factor, trajectory)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / CHECKPOINT_NAME
    state = None
    if args.resume:
        state = load_checkpoint(args.resume).to_state()
        print(f"resuming from step {state.step}")
    dataset = load_dataset(cfg)

    def on_checkpoint(st):
        save_checkpoint(ckpt_path, Checkpoint.from_state(st, cfg))

    state = train(cfg.train_config(), dataset, cfg.denoiser_config(), state, out / LOSS_LOG_NAME, on_checkpoint)
    tail = state.losses[-max(1, len(state.losses) // 10):]
    print(f"trained {state.step} steps; checkpoint {ckpt_path}")
    if tail:
        print(f"final loss {np.mean(tail):.6f}")
    return 0


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    sched = inference_schedule(cfg, args.steps)
    k = resolve_cutoff(cfg, sched, args.cutoff, args.threshold)
    lr = data.read_image(args.input, cfg.image_channels)
    if k is None:
        print(f"full sampling T={sched.T}")
    else:
        print(f"cutoff K={k}")
    traj = Trajectory() if args.trajectory else None
    out = _sample(ckpt.build_model(), lr, sched, k, args.seed, cfg.upsample_factor, traj)
    data.write_image(args.output, out)
    if traj is not None:
        traj.write(args.trajectory)
    print(f"wrote {args.output}")
    return 0


def cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    sched = parse_schedule(cfg.schedule)
    pairs = [(p.lr_up, p.hr) for p in load_dataset(cfg, train_mode=False)]
    curve = analysis.convergence_curve(pairs, sched, cfg.analysis_stride, np.random.default_rng(cfg.seed))
    analysis.write_curve_csv(curve, args.out)
    k = analysis.suggest_cutoff(curve, cfg.analysis_tol_db)
    inf = parse_schedule(cfg.inference_schedule)
    print(f"suggested K={k} of T={sched.T} (sqrt_alpha_bar={sched.sqrt_alpha_bar(k):.4f})")
    print(f"inference cutoff K={transfer_cutoff(k, sched, inf)} of T={inf.T}")
    if args.plot:
        analysis.plot_curve(curve, args.plot, k)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    pairs = data.load_pairs(args.dir, cfg.upsample_factor, cfg.crop, None, False, cfg.image_channels)
    if args.limit:
        pairs = pairs[: args.limit]
    sched = inference_schedule(cfg, args.steps)
    k = resolve_cutoff(cfg, sched, args.cutoff, args.threshold)
    lr = np.stack([p.lr for p in pairs])
    out = _sample(ckpt.build_model(), lr, sched, k, args.seed, cfg.upsample_factor)
    f = cfg.upsample_factor
    rows = {
        "psnr": [analysis.psnr(o, p.hr) for o, p in zip(out, pairs)],
        "ssim": [analysis.ssim(o, p.hr) for o, p in zip(out, pairs)],
        "consistency": [analysis.consistency(o, p.lr, f) for o, p in zip(out, pairs)],
        "bicubic_psnr": [analysis.psnr(p.lr_up, p.hr) for p in pairs],
    }
    print(f"images={len(pairs)} steps={k if k is not None else sched.T}")
    for name, vals in rows.items():
        print(f"{name}={np.mean(vals):.4f}")
    return 0


def cmd_toygen(args) -> int:
    out = Path(args.out)
    (out / "lr").mkdir(parents=True, exist_ok=True)
    pairs = data.toy_dataset(args.n, args.size, args.factor, args.seed, args.channels)
    for i, p in enumerate(pairs):
        data.write_image(out / f"{i:05d}.png", p.hr)
        data.write_image(out / "lr" / f"{i:05d}.png", p.lr)
    print(f"wrote {len(pairs)} pairs to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partdiff", description="Partial diffusion super-resolution")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a denoiser from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    def sampling_options(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--steps", type=int, help="inference schedule length (default: from config)")
        g = p.add_mutually_exclusive_group()
        g.add_argument("--cutoff", type=int, help="partial diffusion cutoff K")
        g.add_argument("--threshold", type=float, help="noise-scale threshold selecting K")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sample", help="super-resolve one low-resolution image")
    sampling_options(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", default="sample.png")
    p.add_argument("--trajectory", help="directory for intermediate latents")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("analyze", help="LR/HR latent convergence curve and suggested cutoff")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--plot", help="optional PNG plot path")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("eval", help="mean PSNR/SSIM/consistency over a directory of HR images")
    sampling_options(p)
    p.add_argument("--dir", required=True)
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("toygen", help="write the procedural toy dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--factor", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.set_defaults(func=cmd_toygen)
    return parser


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
