"""Image ingestion, LR/HR pair construction and augmentation.

Images are float64 arrays shaped (channels, height, width) with values in
[0, 1]. Resampling is separable bicubic (a = -0.5); when shrinking, the
kernel is stretched by the scale factor so it doubles as the anti-alias
prefilter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

CUBIC_A = -0.5
IMAGE_SUFFIXES = (".png", ".bmp", ".ppm", ".pgm", ".tif", ".tiff")


@dataclass
class ImagePair:
    lr: np.ndarray
    lr_up: np.ndarray
    hr: np.ndarray
    factor: int

    def __post_init__(self):
        c, h, w = self.hr.shape
        if self.lr.shape != (c, h // self.factor, w // self.factor) or h % self.factor:
            raise ValueError(f"lr {self.lr.shape} is not hr {self.hr.shape} / {self.factor}")
        if self.lr_up.shape != self.hr.shape:
            raise ValueError(f"lr_up {self.lr_up.shape} does not match hr {self.hr.shape}")


def cubic_kernel(x, a: float = CUBIC_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=64)
def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) weights mapping a 1-d signal onto a resized grid.

    Pixel centres sit at half-integers; weights falling outside the input
    are dropped and the rest renormalised.
    """
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    centres = (np.arange(n_out) + 0.5) * scale
    taps = np.arange(n_in) + 0.5
    w = cubic_kernel((taps[None, :] - centres[:, None]) / stretch)
    w /= w.sum(axis=1, keepdims=True)
    w.setflags(write=False)
    return w


def resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bicubic resize of a (C, H, W) image, clamped to [0, 1]."""
    _, h, w = image.shape
    wy = resample_matrix(h, height)
    wx = resample_matrix(w, width)
    out = wy @ image @ wx.T
    return np.clip(out, 0.0, 1.0)


def downsample_bicubic(image: np.ndarray, factor: int) -> np.ndarray:
    _, h, w = image.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"image {h}x{w} not divisible by factor {factor}")
    if factor == 1:
        return np.array(image, dtype=np.float64)
    return resize(image, h // factor, w // factor)


def upsample_bicubic(image: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    _, h, w = image.shape
    if factor == 1:
        return np.array(image, dtype=np.float64)
    return resize(image, h * factor, w * factor)


def make_pair(hr: np.ndarray, factor: int) -> ImagePair:
    lr = downsample_bicubic(hr, factor)
    return ImagePair(lr=lr, lr_up=upsample_bicubic(lr, factor), hr=hr, factor=factor)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return image.copy()
    return np.stack([gaussian_filter(ch, sigma, mode="reflect") for ch in image])


def augment(
    pair: ImagePair,
    blur_sigma_range: tuple[float, float],
    rng: np.random.Generator,
    flip: bool | None = None,
) -> ImagePair:
    """Random left-right flip of both images plus Gaussian blur of the LR image.

    ``flip`` overrides the coin toss; both draws happen regardless so the
    rng stream does not depend on the override.
    """
    lo, hi = blur_sigma_range
    if lo < 0 or lo > hi:
        raise ValueError(f"bad blur range {blur_sigma_range}")
    toss = rng.random() < 0.5
    sigma = float(rng.uniform(lo, hi))
    do_flip = toss if flip is None else flip
    lr, hr = pair.lr, pair.hr
    if do_flip:
        lr, hr = lr[:, :, ::-1].copy(), hr[:, :, ::-1].copy()
    if sigma > 0:
        lr = np.clip(gaussian_blur(lr, sigma), 0.0, 1.0)
    if not do_flip and sigma <= 0:
        return pair
    return ImagePair(lr=lr, lr_up=upsample_bicubic(lr, pair.factor), hr=hr, factor=pair.factor)


def _toy_image(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = (yy + 0.5) / size
    xx = (xx + 0.5) / size
    img = np.empty((channels, size, size))
    gy, gx = rng.normal(0, 0.3, size=2)
    base = rng.uniform(0.2, 0.8, size=channels)
    for c in range(channels):
        img[c] = base[c] + gy * (yy - 0.5) + gx * (xx - 0.5)

    for _ in range(int(rng.integers(2, 6))):
        colour = rng.uniform(0.0, 1.0, size=channels)
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        ry, rx = rng.uniform(0.08, 0.35, size=2)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img[:, mask] = colour[:, None]

    # band-limited texture: coarse noise upsampled smoothly
    coarse = rng.normal(0.0, 1.0, size=(channels, size // 4 + 1, size // 4 + 1))
    texture = np.stack([gaussian_filter(ch, 0.7) for ch in coarse])
    texture = resize(np.clip(0.5 + 0.25 * texture, 0, 1), size, size) - 0.5
    img += 0.08 * texture
    return np.clip(img, 0.0, 1.0)


def toy_dataset(n: int, size: int, factor: int, seed: int, channels: int = 1) -> list[ImagePair]:
    """Procedural shapes-on-gradients images paired with their downsamples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if size % factor:
        raise ValueError(f"size {size} not divisible by factor {factor}")
    rngs = [np.random.default_rng([seed, i]) for i in range(n)]
    return [make_pair(_toy_image(r, size, channels), factor) for r in rngs]


def read_image(path: str | Path, channels: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        if channels == 1:
            im = im.convert("L")
        elif channels == 3 or im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def quantize(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(path: str | Path, image: np.ndarray) -> None:
    q = quantize(image)
    if q.shape[0] == 1:
        Image.fromarray(q[0], mode="L").save(path)
    else:
        Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path)


def square_crop(image: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
    """Square crop along the longer edge; random offset when ``rng`` is given."""
    _, h, w = image.shape
    side = min(h, w)
    span = max(h, w) - side
    off = int(rng.integers(0, span + 1)) if (rng is not None and span) else span // 2
    if h > w:
        return image[:, off:off + side, :]
    return image[:, :, off:off + side]


def list_images(directory: str | Path) -> list[Path]:
    return sorted(
        p for p in Path(directory).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def load_pairs(
    directory: str | Path,
    factor: int,
    crop: int,
    rng: np.random.Generator | None = None,
    train: bool = True,
    channels: int | None = None,
) -> list[ImagePair]:
    """Load every decodable image in ``directory`` as an LR/HR pair.

    Train mode crops at a random offset drawn from ``rng``; test mode
    centre crops.
    """
    if crop % factor:
        raise ValueError(f"crop {crop} not divisible by factor {factor}")
    paths = list_images(directory)
    pairs = []
    for path in paths:
        try:
            img = read_image(path, channels)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        img = square_crop(img, rng if train else None)
        if img.shape[1] != crop:
            img = resize(img, crop, crop)
        pairs.append(make_pair(img, factor))
    if not pairs:
        raise ValueError(f"no images found in {directory}")
    return pairs


def stack(pairs: list[ImagePair], attr: str) -> np.ndarray:
    return np.stack([getattr(p, attr) for p in pairs])
