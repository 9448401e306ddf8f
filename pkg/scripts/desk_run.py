"""Train the tiny denoiser on toy pairs and compare full, partial and bicubic upsampling.

    python3 scripts/desk_run.py --steps 5000 --out runs/desk
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from partdiff.analysis import convergence_curve, psnr, suggest_cutoff
from partdiff.data import toy_dataset
from partdiff.denoiser import DenoiserConfig
from partdiff.persistence import Checkpoint, RunConfig, save_checkpoint
from partdiff.sampler import sample_full, sample_partial
from partdiff.schedule import parse_schedule, transfer_cutoff
from partdiff.training import train

DESK_MODEL = DenoiserConfig(image_channels=1, base_channels=16, channel_multipliers=(1, 2), residual_blocks_per_stage=1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--train-pairs", type=int, default=500)
    ap.add_argument("--held-out", type=int, default=50)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--tol-db", type=float, default=0.02)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = RunConfig(
        schedule="linear(5e-05,0.01,2000)", data="toy", output_dir=str(out),
        total_steps=args.steps, batch_size=16, learning_rate=args.lr, seed=args.seed, crop=args.size, toy_n=args.train_pairs,
        base_channels=DESK_MODEL.base_channels, channel_multipliers=DESK_MODEL.channel_multipliers,
        residual_blocks_per_stage=DESK_MODEL.residual_blocks_per_stage, log_every=250,
    )
    train_set = toy_dataset(args.train_pairs, args.size, 2, seed=0)
    held = toy_dataset(args.held_out, args.size, 2, seed=12345)

    t0 = time.perf_counter()
    state = train(cfg.train_config(), train_set, cfg.denoiser_config())
    train_s = time.perf_counter() - t0
    save_checkpoint(out / "checkpoint.pdif", Checkpoint.from_state(state, cfg))

    tr = parse_schedule(cfg.schedule)
    inf = parse_schedule(cfg.inference_schedule)
    curve = convergence_curve([(p.lr_up, p.hr) for p in train_set[:100]], tr, 10, np.random.default_rng(0))
    k_train = suggest_cutoff(curve, args.tol_db)
    k = transfer_cutoff(k_train, tr, inf)

    lr = np.stack([p.lr for p in held])
    bic = np.array([psnr(p.lr_up, p.hr) for p in held])
    full = sample_full(state.model, lr, inf, np.random.default_rng(1))
    part = sample_partial(state.model, lr, inf, k, np.random.default_rng(1))
    pf = np.array([psnr(a, p.hr) for a, p in zip(full, held)])
    pp = np.array([psnr(a, p.hr) for a, p in zip(part, held)])

    losses = np.array(state.losses)
    n = max(1, len(losses) // 10)
    report = {
        "train_seconds": round(train_s, 1),
        "loss_first": float(losses[:n].mean()),
        "loss_final": float(losses[-n:].mean()),
        "cutoff_train": int(k_train),
        "cutoff_inference": int(k),
        "psnr_bicubic": float(bic.mean()),
        "psnr_full": float(pf.mean()),
        "psnr_partial": float(pp.mean()),
        "full_beats_bicubic": float((pf > bic).mean()),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    for key, val in report.items():
        print(f"{key}: {val}")


if __name__ == "__main__":
    main()
