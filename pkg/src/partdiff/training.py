"""Latent-alignment training examples and the optimisation loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import data as data_mod
from .denoiser import Batch, Denoiser, DenoiserConfig, NonFiniteError, init_params, loss_and_grad
from .forward_process import diffuse, interpolate_clean, lambda_weight
from .schedule import NoiseSchedule, parse_schedule, sample_noise_scale

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# rng stream tags so batch selection and example construction never share draws
_STREAM_BATCH = 1
_STREAM_EXAMPLES = 2


@dataclass
class TrainConfig:
    schedule: str = "linear(5e-05,0.01,2000)"
    k_fraction: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 16
    total_steps: int = 5000
    loss: str = "l2"
    seed: int = 0
    blur_sigma_range: tuple[float, float] = (0.0, 1.5)
    upsample_factor: int = 2
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if not (0 < self.k_fraction <= 1):
            raise ValueError(f"k_fraction must lie in (0, 1], got {self.k_fraction}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in ("l2", "l1"):
            raise ValueError(f"loss must be l2 or l1, got {self.loss!r}")

    def build_schedule(self) -> NoiseSchedule:
        return parse_schedule(self.schedule)

    def cutoff(self, schedule: NoiseSchedule) -> int:
        return max(1, int(round(self.k_fraction * schedule.T)))


@dataclass
class TrainState:
    model: Denoiser
    optimizer: torch.optim.Optimizer
    step: int = 0
    losses: list[float] = field(default_factory=list)


def make_optimizer(model: Denoiser, learning_rate: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0
    )


def init_state(model_config: DenoiserConfig, config: TrainConfig) -> TrainState:
    model = init_params(model_config, config.seed)
    return TrainState(model=model, optimizer=make_optimizer(model, config.learning_rate))


def make_training_example(pair, schedule: NoiseSchedule, k: int, rng: np.random.Generator):
    """Build (x̂_t, lr_cond, noise_scale, ε, t) for one (lr_up, hr) pair.

    The clean target is pulled from the LR image towards the HR image as
    t falls from K to 1, and both branches share one noise draw.
    """
    lr_cond, hr = pair
    if lr_cond.shape != hr.shape:
        raise ValueError(f"upsampled LR {lr_cond.shape} does not match HR {hr.shape}")
    if k > schedule.T:
        raise ValueError(f"cutoff {k} exceeds schedule length {schedule.T}")
    t, scale = sample_noise_scale(schedule, rng, max_step=k)
    lam = lambda_weight(t, k)
    x0 = interpolate_clean(lr_cond, hr, lam)
    eps = rng.standard_normal(hr.shape)
    return diffuse(x0, scale, eps), lr_cond, scale, eps, t


def _step_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, step])


def build_batch(pairs: Sequence, schedule: NoiseSchedule, k: int, seed: int, step: int) -> Batch:
    """One example per pair; each example gets its own child rng of the step seed."""
    children = np.random.SeedSequence([seed, _STREAM_EXAMPLES, step]).spawn(len(pairs))
    xs, conds, scales, epss, ts = [], [], [], [], []
    for pair, ss in zip(pairs, children):
        x, c, s, e, t = make_training_example(pair, schedule, k, np.random.default_rng(ss))
        xs.append(x)
        conds.append(c)
        scales.append(s)
        epss.append(e)
        ts.append(t)
    f32 = torch.float32
    return Batch(
        x_t=torch.as_tensor(np.stack(xs), dtype=f32),
        lr_cond=torch.as_tensor(np.stack(conds), dtype=f32),
        noise_scale=torch.as_tensor(scales, dtype=f32),
        eps=torch.as_tensor(np.stack(epss), dtype=f32),
        steps=ts,
    )


def train_step(state: TrainState, pairs: Sequence, config: TrainConfig, schedule: NoiseSchedule):
    """One AdamW update on the ε-loss; returns (state, pre-update loss).

    ``pairs`` holds (lr_up, hr) arrays. Randomness is derived from
    (seed, step) so a resumed run replays the same examples.
    """
    if not pairs:
        raise ValueError("empty batch")
    batch = build_batch(pairs, schedule, config.cutoff(schedule), config.seed, state.step)
    state.model.train()
    try:
        loss, _ = loss_and_grad(state.model, batch, config.loss)
    except NonFiniteError as exc:
        raise FloatingPointError(f"step {state.step + 1}: {exc}") from exc
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss} at step {state.step + 1}")
    state.optimizer.step()
    state.model.eval()
    state.step += 1
    state.losses.append(loss)
    return state, loss


def select_batch(dataset: Sequence, config: TrainConfig, step: int) -> list:
    rng = _step_rng(config.seed, _STREAM_BATCH, step)
    idx = rng.integers(0, len(dataset), size=config.batch_size)
    out = []
    for i in idx:
        pair = data_mod.augment(dataset[int(i)], config.blur_sigma_range, rng)
        out.append((pair.lr_up, pair.hr))
    return out


def format_loss_line(step: int, loss: float) -> str:
    return f"step={step} loss={loss:.8g}"


def train(
    config: TrainConfig,
    dataset: Sequence,
    model_config: DenoiserConfig,
    state: TrainState | None = None,
    log_path: str | Path | None = None,
    on_checkpoint: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Run ``train_step`` until ``config.total_steps``.

    Passing a restored ``state`` resumes from its step counter. Loss lines
    are appended to ``log_path``; ``on_checkpoint`` is called every
    ``checkpoint_every`` steps and once at the end.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    schedule = config.build_schedule()
    if state is None:
        state = init_state(model_config, config)
    logf = open(log_path, "a") if log_path else None
    try:
        while state.step < config.total_steps:
            batch = select_batch(dataset, config, state.step)
            state, loss = train_step(state, batch, config, schedule)
            if logf:
                logf.write(format_loss_line(state.step, loss) + "\n")
            if config.log_every and state.step % config.log_every == 0:
                recent = state.losses[-config.log_every:]
                log.info("step %d loss %.5f", state.step, float(np.mean(recent)))
            if on_checkpoint and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                on_checkpoint(state)
    finally:
        if logf:
            logf.close()
    if on_checkpoint:
        on_checkpoint(state)
    return state


def optimizer_arrays(state: TrainState) -> dict[str, np.ndarray]:
    """AdamW moments keyed ``exp_avg/<param>`` and ``exp_avg_sq/<param>``."""
    out = {}
    for name, p in state.model.named_parameters():
        st = state.optimizer.state.get(p)
        if not st:
            continue
        out[f"exp_avg/{name}"] = st["exp_avg"].detach().numpy().copy()
        out[f"exp_avg_sq/{name}"] = st["exp_avg_sq"].detach().numpy().copy()
    return out


def restore_optimizer(state: TrainState, arrays: dict[str, np.ndarray], step: int) -> None:
    for name, p in state.model.named_parameters():
        key = f"exp_avg/{name}"
        if key not in arrays:
            continue
        state.optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(arrays[key].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"exp_avg_sq/{name}"].copy()),
        }
    state.step = step
