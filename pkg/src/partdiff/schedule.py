"""Linear noise schedules and the step/noise-scale bookkeeping around them.

Step indices run from 1 to T. Index 0 denotes the clean image, so
``alpha_bar_at(schedule, 0) == 1``. All arithmetic is float64.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

_LINEAR_RE = re.compile(r"^\s*linear\s*\(\s*([^,]+)\s*,\s*([^,]+)\s*,\s*([^,)]+)\s*\)\s*$")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and everything derived from them.

    Arrays are indexed ``[t - 1]`` for step ``t``; use the accessor
    methods when you want step-indexed lookups.
    """

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    posterior_vars: np.ndarray = field(init=False)
    label: str = ""

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-d sequence")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValueError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        posterior_vars = (1.0 - prev) / (1.0 - alpha_bars) * betas
        for name, value in [
            ("betas", betas),
            ("alphas", alphas),
            ("alpha_bars", alpha_bars),
            ("posterior_vars", posterior_vars),
        ]:
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        ext = np.concatenate([[1.0], alpha_bars])
        ext.setflags(write=False)
        object.__setattr__(self, "_alpha_bar_ext", ext)
        sq = np.sqrt(ext)
        sq.setflags(write=False)
        object.__setattr__(self, "_sqrt_ext", sq)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def _check_step(self, t: int, lowest: int = 1) -> int:
        t = int(t)
        if t < lowest or t > self.T:
            raise IndexError(f"step {t} outside [{lowest}, {self.T}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_step(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check_step(t) - 1])

    def posterior_var(self, t: int) -> float:
        return float(self.posterior_vars[self._check_step(t) - 1])

    def sqrt_alpha_bar(self, t: int) -> float:
        return float(self._sqrt_ext[self._check_step(t, lowest=0)])

    @property
    def sqrt_alpha_bars(self) -> np.ndarray:
        """√ᾱ_t for t = 0..T (length T + 1, first entry 1)."""
        return self._sqrt_ext

    def __repr__(self):
        return f"NoiseSchedule({self.label or f'T={self.T}'})"


def build_linear_schedule(beta_start: float, beta_end: float, steps: int) -> NoiseSchedule:
    """Betas spaced linearly from ``beta_start`` to ``beta_end`` inclusive."""
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    if int(steps) != steps or steps < 1:
        raise ValueError(f"steps must be a positive integer, got {steps}")
    steps = int(steps)
    if steps == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        idx = np.arange(steps, dtype=np.float64)
        betas = beta_start + idx / (steps - 1) * (beta_end - beta_start)
    return NoiseSchedule(betas, label=format_schedule(beta_start, beta_end, steps))


def format_schedule(beta_start: float, beta_end: float, steps: int) -> str:
    return f"linear({beta_start!r},{beta_end!r},{int(steps)})"


def parse_schedule(text: str) -> NoiseSchedule:
    """Parse ``linear(<beta_start>,<beta_end>,<steps>)``."""
    m = _LINEAR_RE.match(text)
    if m is None:
        raise ValueError(f"malformed schedule {text!r}; expected linear(b1,bT,T)")
    try:
        b1, bt = float(m.group(1)), float(m.group(2))
        steps = int(m.group(3))
    except ValueError as exc:
        raise ValueError(f"malformed schedule {text!r}: {exc}") from None
    return build_linear_schedule(b1, bt, steps)


def alpha_bar_at(schedule: NoiseSchedule, t: int) -> float:
    if int(t) < 0 or int(t) > schedule.T:
        raise IndexError(f"step {t} outside [0, {schedule.T}]")
    return float(schedule._alpha_bar_ext[int(t)])


def sample_noise_scale(
    schedule: NoiseSchedule, rng: np.random.Generator, max_step: int | None = None
) -> tuple[int, float]:
    """Draw a step uniformly, then √ᾱ uniformly inside that step's interval.

    ``max_step`` restricts the step draw to ``1..max_step``.
    """
    top = schedule.T if max_step is None else int(max_step)
    if top < 1 or top > schedule.T:
        raise IndexError(f"max_step {top} outside [1, {schedule.T}]")
    t = int(rng.integers(1, top + 1))
    return t, scale_in_step(schedule, t, rng)


def scale_in_step(schedule: NoiseSchedule, t: int, rng: np.random.Generator) -> float:
    lo = schedule._sqrt_ext[t]
    hi = schedule._sqrt_ext[t - 1]
    return float(rng.uniform(lo, hi))


def cutoff_step_for_threshold(schedule: NoiseSchedule, threshold: float) -> int:
    """Largest ``t`` whose noise scale is still at or above ``threshold``."""
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    # sqrt scales are strictly decreasing, so counting works as a search
    return int(np.count_nonzero(schedule._sqrt_ext[1:] >= threshold))


def transfer_cutoff(k: int, source: NoiseSchedule, target: NoiseSchedule) -> int:
    """Map a cutoff on ``source`` to the step of ``target`` with matching noise scale."""
    if k <= 0:
        return 0
    return max(1, cutoff_step_for_threshold(target, source.sqrt_alpha_bar(k)))
