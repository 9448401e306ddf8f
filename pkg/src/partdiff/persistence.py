"""Run configuration text format and the binary checkpoint layout.

Checkpoint layout, all integers little-endian::

    b"PDIF" | u32 version | u32 len | config text (UTF-8)
    | u32 tensor count | per tensor: u32 len, name, u32 rank, u32 dims..., f32 data
    | u64 FNV-1a of every preceding byte

The config text is the canonical ``key = value`` rendering of the run
config followed by a ``step = <n>`` line. Tensors are the model
parameters, then optimizer moments named ``exp_avg/<param>`` and
``exp_avg_sq/<param>``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numba
import numpy as np

from .denoiser import DenoiserConfig, init_params, load_arrays, params_to_arrays
from .schedule import parse_schedule
from .training import TrainConfig, TrainState, make_optimizer, optimizer_arrays, restore_optimizer

MAGIC = b"PDIF"
VERSION = 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


REQUIRED_KEYS = ("schedule", "data", "output_dir")


@dataclass
class RunConfig:
    schedule: str = ""
    data: str = ""
    output_dir: str = ""
    inference_schedule: str = "linear(1e-05,0.213,100)"
    k_fraction: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 16
    total_steps: int = 5000
    loss: str = "l2"
    seed: int = 0
    blur_sigma_range: tuple[float, float] = (0.0, 1.5)
    upsample_factor: int = 2
    image_channels: int = 1
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2)
    residual_blocks_per_stage: int = 2
    group_channels: int = 16
    cutoff: int | None = None
    threshold: float | None = None
    crop: int = 32
    toy_n: int = 500
    toy_seed: int = 0
    analysis_stride: int = 10
    analysis_tol_db: float = 0.02
    log_every: int = 100
    checkpoint_every: int = 1000

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            schedule=self.schedule,
            k_fraction=self.k_fraction,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            total_steps=self.total_steps,
            loss=self.loss,
            seed=self.seed,
            blur_sigma_range=self.blur_sigma_range,
            upsample_factor=self.upsample_factor,
            log_every=self.log_every,
            checkpoint_every=self.checkpoint_every,
        )

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            image_channels=self.image_channels,
            base_channels=self.base_channels,
            channel_multipliers=self.channel_multipliers,
            residual_blocks_per_stage=self.residual_blocks_per_stage,
            group_channels=self.group_channels,
        )

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_render(getattr(self, f.name))}\n" for f in fields(self))


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _opt(conv):
    def parse(text):
        return None if text.lower() == "none" else conv(text)
    return parse


def _tuple(conv, length=None):
    def parse(text):
        items = tuple(conv(p.strip()) for p in text.split(",") if p.strip())
        if not items or (length and len(items) != length):
            raise ValueError(f"expected {length or 'one or more'} comma-separated values")
        return items
    return parse


def _schedule(text):
    return parse_schedule(text).label


_PARSERS = {
    "schedule": _schedule,
    "inference_schedule": _schedule,
    "data": str,
    "output_dir": str,
    "loss": str,
    "k_fraction": float,
    "learning_rate": float,
    "analysis_tol_db": float,
    "blur_sigma_range": _tuple(float, 2),
    "channel_multipliers": _tuple(int),
    "cutoff": _opt(int),
    "threshold": _opt(float),
}


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(RunConfig)}
    seen: dict[str, int] = {}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        parser = _PARSERS.get(key, int)
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    missing = [k for k in REQUIRED_KEYS if k not in values]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    if values.get("cutoff") is not None and values.get("threshold") is not None:
        raise ConfigError(
            f"line {max(seen['cutoff'], seen['threshold'])}: set either cutoff or threshold, not both"
        )
    cfg = RunConfig(**values)
    try:
        cfg.train_config()
        cfg.denoiser_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


@numba.njit(cache=True)
def _fnv1a(buf):
    h = numba.uint64(FNV_OFFSET)
    prime = numba.uint64(FNV_PRIME)
    for b in buf:
        h = (h ^ numba.uint64(b)) * prime
    return h


def fnv1a64(data: bytes) -> int:
    return int(_fnv1a(np.frombuffer(data, dtype=np.uint8)))


@dataclass
class Checkpoint:
    config: RunConfig
    step: int
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_state(cls, state: TrainState, config: RunConfig) -> "Checkpoint":
        return cls(config, state.step, params_to_arrays(state.model), optimizer_arrays(state))

    def build_model(self):
        model = init_params(self.config.denoiser_config(), self.config.seed)
        load_arrays(model, self.params)
        return model

    def to_state(self) -> TrainState:
        model = self.build_model()
        state = TrainState(model=model, optimizer=make_optimizer(model, self.config.learning_rate))
        restore_optimizer(state, self.optimizer, self.step)
        return state


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, _u32(VERSION)]
    blob = (ckpt.config.to_text() + f"step = {ckpt.step}\n").encode("utf-8")
    parts += [_u32(len(blob)), blob]
    tensors = list(ckpt.params.items()) + list(ckpt.optimizer.items())
    parts.append(_u32(len(tensors)))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts += [_u32(len(nb)), nb, _u32(arr.ndim)]
        parts += [_u32(d) for d in arr.shape]
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, tail = buf[:-8], buf[-8:]
    if struct.unpack("<Q", tail)[0] != fnv1a64(body):
        raise CheckpointError("checksum mismatch: checkpoint is corrupted")
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} (expected {VERSION})")
    text = r.take(r.u32()).decode("utf-8")
    lines = text.splitlines()
    step_lines = [ln for ln in lines if ln.startswith("step =")]
    if len(step_lines) != 1:
        raise CheckpointError("config blob lacks a step line")
    step = int(step_lines[0].split("=", 1)[1])
    config = parse_config("\n".join(ln for ln in lines if not ln.startswith("step =")))
    params, moments = {}, {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        dims = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        (moments if "/" in name else params)[name] = arr
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensors")
    ckpt = Checkpoint(config, step, params, moments)
    try:
        ckpt.build_model()
    except ValueError as exc:
        raise CheckpointError(f"tensors do not match the configured denoiser: {exc}") from None
    return ckpt


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
