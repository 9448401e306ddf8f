"""Partial diffusion models for image super-resolution."""

from .schedule import (
    NoiseSchedule,
    alpha_bar_at,
    build_linear_schedule,
    cutoff_step_for_threshold,
    sample_noise_scale,
)

__version__ = "0.1.0"
