"""Reverse-process sampling: full conditional DDPM and partial diffusion.

Partial sampling starts from the LR conditioner diffused to step K and
runs only K denoising steps. Reverse variance is the forward posterior
variance; the last step adds no noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import upsample_bicubic, write_image
from .denoiser import Denoiser, mu_from_eps, predict_noise
from .forward_process import diffuse
from .schedule import NoiseSchedule

TRAJECTORY_EVERY = 10


@dataclass
class SampleRequest:
    lr_image: np.ndarray
    schedule: NoiseSchedule
    cutoff: int | None = None  # None samples the full chain
    seed: int = 0
    factor: int = 2
    record_trajectory: bool = False

    def __post_init__(self):
        if self.cutoff is not None and not (1 <= self.cutoff <= self.schedule.T):
            raise ValueError(f"cutoff {self.cutoff} outside [1, {self.schedule.T}]")


@dataclass
class Trajectory:
    every: int = TRAJECTORY_EVERY
    entries: list[tuple[int, float, np.ndarray]] = field(default_factory=list)

    def record(self, t: int, scale: float, x: torch.Tensor, force: bool = False):
        if force or t % self.every == 0:
            self.entries.append((t, scale, x.detach().double().numpy().copy()))

    def write(self, directory: str | Path) -> None:
        """Dump latents as images plus a ``manifest.txt`` of ``t=<step> scale=<√ᾱ>`` lines."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        lines = []
        for t, scale, x in self.entries:
            img = x[0] if x.ndim == 4 else x
            write_image(out / f"t{t:05d}.png", img)
            lines.append(f"t={t} scale={scale:.8g}")
        (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _normal(rng: np.random.Generator, shape) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(tuple(shape)).astype(np.float32))


def _conditioner(lr_image: np.ndarray, factor: int) -> torch.Tensor:
    lr = np.asarray(lr_image, dtype=np.float64)
    if lr.ndim == 3:
        up = upsample_bicubic(lr, factor)
    else:
        up = np.stack([upsample_bicubic(x, factor) for x in lr])
    return torch.as_tensor(up, dtype=torch.float32)


def denoise_step(model: Denoiser, x_t, lr_cond, schedule: NoiseSchedule, t: int, rng: np.random.Generator):
    """x_{t-1} given x_t: one network evaluation plus posterior-variance noise."""
    eps_hat = predict_noise(model, x_t, lr_cond, schedule.sqrt_alpha_bar(t))
    if not torch.isfinite(torch.as_tensor(eps_hat)).all():
        raise FloatingPointError(f"non-finite network output at step {t}")
    mean = mu_from_eps(x_t, eps_hat, schedule, t)
    if t == 1:
        return mean
    z = _normal(rng, mean.shape)
    if isinstance(mean, np.ndarray):
        z = z.numpy()
    return mean + math.sqrt(schedule.posterior_var(t)) * z


def _run_chain(model, x, cond, schedule, start, rng, trajectory):
    if trajectory is not None:
        trajectory.record(start, schedule.sqrt_alpha_bar(start), x, force=True)
    for t in range(start, 0, -1):
        x = denoise_step(model, x, cond, schedule, t, rng)
        if trajectory is not None:
            trajectory.record(t - 1, schedule.sqrt_alpha_bar(t - 1), x, force=t == 1)
    return torch.clamp(x, 0.0, 1.0).double().numpy()


def sample_full(
    model: Denoiser,
    lr_image: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    factor: int = 2,
    trajectory: Trajectory | None = None,
) -> np.ndarray:
    """T denoising steps from pure noise.

    ``lr_image`` is the low-resolution input, (C, h, w) or batched.
    """
    cond = _conditioner(lr_image, factor)
    x = _normal(rng, cond.shape)
    return _run_chain(model, x, cond, schedule, schedule.T, rng, trajectory)


def sample_partial(
    model: Denoiser,
    lr_image: np.ndarray,
    schedule: NoiseSchedule,
    k: int,
    rng: np.random.Generator,
    factor: int = 2,
    trajectory: Trajectory | None = None,
) -> np.ndarray:
    """K denoising steps starting from the upsampled LR image diffused to step K."""
    if not (1 <= k <= schedule.T):
        raise ValueError(f"cutoff {k} outside [1, {schedule.T}]")
    cond = _conditioner(lr_image, factor)
    x = diffuse(cond, schedule.sqrt_alpha_bar(k), _normal(rng, cond.shape))
    return _run_chain(model, x, cond, schedule, k, rng, trajectory)


def run_request(model: Denoiser, request: SampleRequest) -> tuple[np.ndarray, Trajectory | None]:
    rng = np.random.default_rng(request.seed)
    traj = Trajectory() if request.record_trajectory else None
    if request.cutoff is None:
        out = sample_full(model, request.lr_image, request.schedule, rng, request.factor, traj)
    else:
        out = sample_partial(model, request.lr_image, request.schedule, request.cutoff, rng, request.factor, traj)
    return out, traj
