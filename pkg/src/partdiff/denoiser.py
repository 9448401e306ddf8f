"""Conditional noise-prediction UNet.

The network sees the channel concatenation ``[lr_cond, x_t]`` and the
continuous noise scale √ᾱ, which enters every residual block through a
learned embedding. Normalisation groups hold a fixed number of channels
rather than a fixed number of groups.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .schedule import NoiseSchedule

NOISE_EMBED_SCALE = 1000.0
# CPU conv kernels reduce in a thread-count dependent order; pinning the
# intra-op pool keeps outputs bit-identical whatever the caller has set.
NETWORK_THREADS = int(os.environ.get("PARTDIFF_THREADS", "1"))


@contextmanager
def pinned_threads(n: int | None = None):
    n = NETWORK_THREADS if n is None else n
    before = torch.get_num_threads()
    if before != n:
        torch.set_num_threads(n)
    try:
        yield
    finally:
        if before != n:
            torch.set_num_threads(before)


@dataclass(frozen=True)
class DenoiserConfig:
    image_channels: int = 1
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2)
    residual_blocks_per_stage: int = 2
    group_channels: int = 16
    embed_dim: int | None = None

    def __post_init__(self):
        mults = tuple(self.channel_multipliers)
        if any(int(m) != m for m in mults):
            raise ValueError(f"channel_multipliers must be integers, got {mults}")
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in mults))
        self.validate()

    @property
    def in_channels(self) -> int:
        return 2 * self.image_channels

    @property
    def noise_embed_dim(self) -> int:
        return self.embed_dim or 4 * self.base_channels

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channel_multipliers) - 1)

    def stage_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def validate(self):
        if self.image_channels < 1 or self.base_channels < 1 or self.group_channels < 1:
            raise ValueError("channel counts must be positive")
        if not self.channel_multipliers or min(self.channel_multipliers) < 1:
            raise ValueError("channel_multipliers must be a non-empty sequence of positive integers")
        if self.residual_blocks_per_stage < 1:
            raise ValueError("residual_blocks_per_stage must be >= 1")
        for ch in [self.base_channels, *self.stage_channels()]:
            if ch % self.group_channels:
                raise ValueError(f"{ch} channels not divisible by group_channels={self.group_channels}")


def noise_scale_features(scale: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of √ᾱ, shape (N, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=scale.dtype, device=scale.device) / half
    )
    arg = NOISE_EMBED_SCALE * scale[:, None] * freqs[None, :]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)


def _norm(channels: int, group_channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(channels // group_channels, channels)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, embed_dim: int, group_channels: int):
        super().__init__()
        self.norm1 = _norm(c_in, group_channels)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.embed = nn.Linear(embed_dim, c_out)
        self.norm2 = _norm(c_out, group_channels)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.embed(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """ε_θ(x_t, lr_cond, √ᾱ)."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        gc = config.group_channels
        edim = config.noise_embed_dim
        self.noise_mlp = nn.Sequential(
            nn.Linear(config.base_channels, edim), nn.SiLU(), nn.Linear(edim, edim)
        )
        self.conv_in = nn.Conv2d(config.in_channels, config.base_channels, 3, padding=1)

        chans = config.stage_channels()
        self.down = nn.ModuleList()
        self.pools = nn.ModuleList()
        skips = [config.base_channels]
        c = config.base_channels
        for i, ch in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(config.residual_blocks_per_stage):
                blocks.append(ResBlock(c, ch, edim, gc))
                c = ch
                skips.append(c)
            self.down.append(blocks)
            if i < len(chans) - 1:
                self.pools.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
                skips.append(c)

        self.mid = nn.ModuleList([ResBlock(c, c, edim, gc), ResBlock(c, c, edim, gc)])

        self.up = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for i, ch in reversed(list(enumerate(chans))):
            blocks = nn.ModuleList()
            for _ in range(config.residual_blocks_per_stage + 1):
                blocks.append(ResBlock(c + skips.pop(), ch, edim, gc))
                c = ch
            self.up.append(blocks)
            if i > 0:
                self.upsamplers.append(nn.Conv2d(c, c, 3, padding=1))

        self.norm_out = _norm(c, gc)
        self.conv_out = nn.Conv2d(c, config.image_channels, 3, padding=1)

    def forward(self, x_t: torch.Tensor, lr_cond: torch.Tensor, noise_scale: torch.Tensor):
        emb = self.noise_mlp(noise_scale_features(noise_scale, self.config.base_channels))
        h = self.conv_in(torch.cat([lr_cond, x_t], dim=1))
        hs = [h]
        for i, blocks in enumerate(self.down):
            for block in blocks:
                h = block(h, emb)
                hs.append(h)
            if i < len(self.pools):
                h = self.pools[i](h)
                hs.append(h)
        for block in self.mid:
            h = block(h, emb)
        for i, blocks in enumerate(self.up):
            for block in blocks:
                h = block(torch.cat([h, hs.pop()], dim=1), emb)
            if i < len(self.upsamplers):
                h = self.upsamplers[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def init_params(config: DenoiserConfig, seed: int) -> Denoiser:
    """Fresh network; PyTorch's fan-in scaled uniform init under a private seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Denoiser(config)
    model.eval()
    return model


def params_to_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def load_arrays(model: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    expected = model.state_dict()
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise ValueError(f"parameter names differ: missing={missing} unexpected={extra}")
    for name, ref in expected.items():
        if tuple(arrays[name].shape) != tuple(ref.shape):
            raise ValueError(f"{name}: shape {arrays[name].shape} != expected {tuple(ref.shape)}")
    model.load_state_dict(
        {k: torch.from_numpy(np.ascontiguousarray(v)).to(expected[k].dtype) for k, v in arrays.items()}
    )


def _as_batch(x, dtype):
    t = torch.as_tensor(x, dtype=dtype)
    return (t[None], True) if t.dim() == 3 else (t, False)


def predict_noise(model: Denoiser, x_t, lr_cond, noise_scale):
    """ε̂ with the shape of ``x_t``.

    Accepts single images (C, H, W) or batches; numpy in gives numpy out.
    ``noise_scale`` is a float or one value per batch element.
    """
    numpy_in = isinstance(x_t, np.ndarray)
    dtype = next(model.parameters()).dtype
    x, single = _as_batch(x_t, dtype)
    c, _ = _as_batch(lr_cond, dtype)
    if x.shape != c.shape:
        raise ValueError(f"x_t {tuple(x.shape)} and lr_cond {tuple(c.shape)} differ")
    if x.shape[1] != model.config.image_channels:
        raise ValueError(f"expected {model.config.image_channels} channels, got {x.shape[1]}")
    if not (torch.isfinite(x).all() and torch.isfinite(c).all()):
        raise ValueError("non-finite network input")
    s = torch.as_tensor(noise_scale, dtype=dtype).reshape(-1)
    if s.numel() == 1:
        s = s.expand(x.shape[0])
    if torch.any(s <= 0) or torch.any(s > 1):
        raise ValueError("noise_scale must lie in (0, 1]")
    with torch.no_grad(), pinned_threads():
        out = model(x, c, s)
    if single:
        out = out[0]
    return out.numpy() if numpy_in else out


def mu_from_eps(x_t, eps_hat, schedule: NoiseSchedule, t: int):
    """Reverse-step mean implied by a noise prediction."""
    if tuple(x_t.shape) != tuple(eps_hat.shape):
        raise ValueError(f"shape mismatch {tuple(x_t.shape)} vs {tuple(eps_hat.shape)}")
    beta = schedule.beta(t)
    one_minus_ab = 1.0 - schedule.sqrt_alpha_bar(t) ** 2
    return (x_t - (beta / math.sqrt(one_minus_ab)) * eps_hat) / math.sqrt(schedule.alpha(t))


class NonFiniteError(FloatingPointError):
    pass


def _first_nonfinite_layer(model: nn.Module, inputs) -> str:
    found = []

    def hook(name):
        def fn(mod, args, out):
            if not found and isinstance(out, torch.Tensor) and not torch.isfinite(out).all():
                found.append(name)
        return fn

    handles = [m.register_forward_hook(hook(n)) for n, m in model.named_modules() if n]
    try:
        with torch.no_grad():
            model(*inputs)
    finally:
        for h in handles:
            h.remove()
    return found[0] if found else "<output>"


@dataclass
class Batch:
    x_t: torch.Tensor
    lr_cond: torch.Tensor
    noise_scale: torch.Tensor
    eps: torch.Tensor
    steps: list[int] = field(default_factory=list)

    def __len__(self):
        return self.x_t.shape[0]


def loss_and_grad(model: Denoiser, batch: Batch, norm: str = "l2", backward: bool = True):
    """Mean per-pixel error between predicted and target noise, plus gradients.

    Gradients land in ``param.grad`` and are also returned by name.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    inputs = (batch.x_t, batch.lr_cond, batch.noise_scale)
    if norm not in ("l1", "l2"):
        raise ValueError(f"unknown loss norm {norm!r}")
    model.zero_grad(set_to_none=True)
    with pinned_threads():
        pred = model(*inputs)
        if not torch.isfinite(pred).all():
            layer = _first_nonfinite_layer(model, inputs)
            raise NonFiniteError(f"non-finite activations first produced by layer {layer}")
        diff = pred - batch.eps
        loss = diff.pow(2).mean() if norm == "l2" else diff.abs().mean()
        if backward:
            loss.backward()
    grads = {}
    if backward:
        grads = {
            n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for n, p in model.named_parameters()
        }
    return float(loss.detach()), grads
