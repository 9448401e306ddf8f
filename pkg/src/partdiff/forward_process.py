"""Closed-form diffusion math.

Every function here is plain arithmetic, so it accepts numpy arrays and
torch tensors alike (including batched leading dimensions).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

from .schedule import NoiseSchedule, alpha_bar_at

SCALE_FLOOR = 1e-8


@dataclass
class LatentState:
    data: Any
    t: int | None
    sqrt_alpha_bar: float

    def __post_init__(self):
        if not (0.0 < self.sqrt_alpha_bar <= 1.0):
            raise ValueError(f"sqrt_alpha_bar must lie in (0, 1], got {self.sqrt_alpha_bar}")


@dataclass
class GaussianMoments:
    """Mean tensor and isotropic scalar variance."""

    mean: Any
    variance: float

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError(f"negative variance {self.variance}")


def _same_shape(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def diffuse(x0, sqrt_alpha_bar: float, noise):
    """x_t = √ᾱ·x0 + √(1−ᾱ)·noise."""
    _same_shape(x0, noise, "diffuse")
    s = float(sqrt_alpha_bar)
    if not (0.0 < s <= 1.0):
        raise ValueError(f"sqrt_alpha_bar must lie in (0, 1], got {s}")
    return s * x0 + math.sqrt(max(0.0, 1.0 - s * s)) * noise


def invert_diffuse(x_t, sqrt_alpha_bar: float, noise):
    """Recover x0 from x_t and the noise that produced it."""
    _same_shape(x_t, noise, "invert_diffuse")
    s = float(sqrt_alpha_bar)
    if s < SCALE_FLOOR:
        raise ZeroDivisionError(f"sqrt_alpha_bar {s} below {SCALE_FLOOR}")
    return (x_t - math.sqrt(max(0.0, 1.0 - s * s)) * noise) / s


def posterior_coefficients(schedule: NoiseSchedule, t: int) -> tuple[float, float]:
    """(coef on x0, coef on x_t) of the forward posterior mean at step t."""
    beta = schedule.beta(t)
    ab = alpha_bar_at(schedule, t)
    ab_prev = alpha_bar_at(schedule, t - 1)
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = math.sqrt(schedule.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab)
    return c0, ct


def forward_posterior(x_t, x0, schedule: NoiseSchedule, t: int) -> GaussianMoments:
    """Moments of q(x_{t-1} | x_t, x0)."""
    _same_shape(x_t, x0, "forward_posterior")
    c0, ct = posterior_coefficients(schedule, t)
    return GaussianMoments(c0 * x0 + ct * x_t, schedule.posterior_var(t))


def lambda_weight(t: int, k: int) -> float:
    """Alignment weight (K − t)/K; 0 at the cutoff, approaching 1 near t = 1."""
    if k < 1:
        raise ValueError(f"cutoff must be >= 1, got {k}")
    if t < 1 or t > k:
        raise IndexError(f"step {t} outside [1, {k}]")
    return (k - t) / k


def interpolate_clean(x0_lr, x0_hr, lam: float):
    _same_shape(x0_lr, x0_hr, "interpolate_clean")
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam * x0_hr + (1.0 - lam) * x0_lr


def interpolated_posterior(
    x_t_hr, x0_hr, x_t_lr, x0_lr, schedule: NoiseSchedule, t: int, k: int, lam: float | None = None
) -> GaussianMoments:
    """λ-blend of the HR and LR forward posteriors; variance is unchanged.

    ``lam`` overrides the weight implied by (t, k).
    """
    if lam is None:
        lam = lambda_weight(t, k)
    elif not (0.0 <= lam <= 1.0):
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    hr = forward_posterior(x_t_hr, x0_hr, schedule, t)
    lr = forward_posterior(x_t_lr, x0_lr, schedule, t)
    return GaussianMoments(lam * hr.mean + (1.0 - lam) * lr.mean, hr.variance)
