"""Image metrics and the LR/HR latent convergence study."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import correlate2d

from .data import downsample_bicubic
from .schedule import NoiseSchedule, build_linear_schedule

PSNR_CAP = 99.0
MSE_FLOOR = 1e-10
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
CONSISTENCY_SCALE = 1e4
CSV_HEADER = ("t", "sqrt_alpha_bar", "psnr_lr", "psnr_hr")


class ConvergenceError(RuntimeError):
    pass


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def mse(a: np.ndarray, b: np.ndarray) -> float:
    _check_pair(a, b)
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def psnr_from_mse(m):
    m = np.asarray(m, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = np.where(m < MSE_FLOOR, PSNR_CAP, -10.0 * np.log10(np.maximum(m, MSE_FLOOR)))
    return out


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for [0, 1] images, capped at 99 dB."""
    return float(psnr_from_mse(mse(a, b)))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(a: np.ndarray, b: np.ndarray, window: np.ndarray) -> float:
    def filt(x):
        return correlate2d(x, window, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over valid 11×11 Gaussian windows, averaged across channels."""
    _check_pair(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    window = _gaussian_window()
    return float(np.mean([_ssim_channel(x, y, window) for x, y in zip(a, b)]))


def consistency(sr_output: np.ndarray, lr_input: np.ndarray, factor: int) -> float:
    """MSE (×1e4) between the downsampled output and the LR input."""
    c, h, w = sr_output.shape
    if lr_input.shape != (c, h // factor, w // factor) or h % factor or w % factor:
        raise ValueError(f"output {sr_output.shape} is not {factor}x input {lr_input.shape}")
    return CONSISTENCY_SCALE * mse(downsample_bicubic(sr_output, factor), lr_input)


@dataclass
class ConvergenceCurve:
    steps: np.ndarray
    sqrt_alpha_bar: np.ndarray
    psnr_lr: np.ndarray
    psnr_hr: np.ndarray
    n_pairs: int

    def __post_init__(self):
        n = len(self.steps)
        if not (len(self.sqrt_alpha_bar) == len(self.psnr_lr) == len(self.psnr_hr) == n):
            raise ValueError("curve sequences differ in length")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")

    @property
    def gap(self) -> np.ndarray:
        return np.abs(self.psnr_hr - self.psnr_lr)


def recorded_steps(T: int, stride: int) -> np.ndarray:
    steps = list(range(0, T + 1, stride))
    if steps[-1] != T:
        steps.append(T)
    return np.asarray(steps)


def convergence_curve(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    schedule: NoiseSchedule,
    stride: int,
    rng: np.random.Generator,
) -> ConvergenceCurve:
    """Average PSNR of diffused LR and HR latents against the clean HR image.

    ``pairs`` holds (lr_up, hr). Each pair gets one noise draw shared by
    both branches and all steps.
    """
    if not pairs:
        raise ValueError("no pairs")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    lr = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
    hr = np.stack([np.asarray(p[1], dtype=np.float64) for p in pairs])
    if lr.shape != hr.shape:
        raise ValueError(f"lr {lr.shape} and hr {hr.shape} differ")
    eps = rng.standard_normal(hr.shape)
    axes = tuple(range(1, hr.ndim))
    steps = recorded_steps(schedule.T, stride)
    scales = schedule.sqrt_alpha_bars[steps]
    p_lr, p_hr = [], []
    for s in scales:
        noise = math.sqrt(max(0.0, 1.0 - s * s)) * eps
        xt_lr = s * lr + noise
        xt_hr = s * hr + noise
        p_lr.append(psnr_from_mse(np.mean((xt_lr - hr) ** 2, axis=axes)).mean())
        p_hr.append(psnr_from_mse(np.mean((xt_hr - hr) ** 2, axis=axes)).mean())
    return ConvergenceCurve(steps, scales.copy(), np.array(p_lr), np.array(p_hr), len(pairs))


def suggest_cutoff(curve: ConvergenceCurve, tol_db: float) -> int:
    """First recorded step after which the LR/HR gap stays within ``tol_db``."""
    ok = curve.gap <= tol_db
    if not ok[-1]:
        raise ConvergenceError("no convergence within schedule")
    # index of the last failing entry, +1
    bad = np.flatnonzero(~ok)
    first = 0 if bad.size == 0 else int(bad[-1]) + 1
    return int(curve.steps[first])


def write_curve_csv(curve: ConvergenceCurve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for t, s, a, b in zip(curve.steps, curve.sqrt_alpha_bar, curve.psnr_lr, curve.psnr_hr):
            w.writerow([int(t), f"{s:.10g}", f"{a:.6f}", f"{b:.6f}"])


def read_curve_csv(path: str | Path) -> ConvergenceCurve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"unexpected header {rows[0]}")
    cols = np.array([[float(v) for v in r] for r in rows[1:]])
    return ConvergenceCurve(cols[:, 0].astype(int), cols[:, 1], cols[:, 2], cols[:, 3], 1)


def plot_curve(curve: ConvergenceCurve, path: str | Path, cutoff: int | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    # the capped t=0 HR value would flatten the rest of the plot
    keep = curve.psnr_hr < 98.0
    ax.plot(curve.steps[keep], curve.psnr_hr[keep], label="HR latent")
    ax.plot(curve.steps, curve.psnr_lr, label="LR latent")
    if cutoff is not None:
        ax.axvline(cutoff, color="grey", ls="--", lw=1, label=f"K={cutoff}")
    ax.set_xlabel("step t")
    ax.set_ylabel("PSNR vs clean HR (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def schedule_grid(
    beta_starts: Sequence[float], beta_ends: Sequence[float], steps: int, at_step: int
) -> list[tuple[float, float, float]]:
    """√ᾱ at ``at_step`` for every linear schedule in the grid."""
    rows = []
    for b1 in beta_starts:
        for bt in beta_ends:
            if b1 > bt:
                continue
            s = build_linear_schedule(b1, bt, steps)
            rows.append((b1, bt, s.sqrt_alpha_bar(at_step)))
    return rows
