"""Input and gradient transforms the attack family depends on.

All functions are pure given an explicit RNG stream, preserve the image
shape, and keep pixel values in [0,1], so workers can run them in
parallel with per-image streams.

Conventions fixed here (and relied on by the attacks):
  - resizing is bilinear, align-corners-false;
  - padding fills with zeros, placement offsets are uniform over all
    valid positions;
  - the pad-then-resize transform pool always has the identity as its
    first member (the attacks add randomly drawn members after it).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, UsageError
from .tensor import Tensor


@dataclass(frozen=True)
class PadResizeSpec:
    """Random zero-padding around an image, then resize back to target_size.

    Padded side length is drawn uniformly from [pad_min, pad_max). Defaults
    preserve the padded/original ratio of the reference protocol at the
    28-pixel scale.
    """

    target_size: int
    pad_min: int
    pad_max: int  # exclusive

    def __post_init__(self):
        if self.pad_min < self.target_size:
            raise ConfigError("pad_min must be >= target_size")
        if self.pad_max <= self.pad_min:
            raise ConfigError("pad_max must be > pad_min")

    @classmethod
    def default_for(cls, target_size: int) -> "PadResizeSpec":
        pad_min = target_size + 1
        pad_max = max(pad_min + 1, int(round(target_size * 330.0 / 299.0)))
        return cls(target_size, pad_min, pad_max)


def bilinear_resize(x: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Align-corners-false bilinear resampling over the trailing two axes."""
    if new_h < 1 or new_w < 1:
        raise ConfigError("bilinear_resize needs positive target dims")
    h, w = x.shape[-2], x.shape[-1]
    if (new_h, new_w) == (h, w):
        return x.copy()

    def axis_weights(n_src, n_dst):
        src = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        src = np.clip(src, 0.0, n_src - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = src - lo
        return lo, hi, frac

    r0, r1, fr = axis_weights(h, new_h)
    c0, c1, fc = axis_weights(w, new_w)
    top = x[..., r0, :][..., :, c0] * (1 - fc) + x[..., r0, :][..., :, c1] * fc
    bot = x[..., r1, :][..., :, c0] * (1 - fc) + x[..., r1, :][..., :, c1] * fc
    return top * (1 - fr[:, None]) + bot * fr[:, None]


def random_pad_resize(x: np.ndarray, spec: PadResizeSpec, rng) -> np.ndarray:
    """Place x at a random offset in a larger zero canvas, resize back.

    The result is a slightly shrunk, randomly shifted copy of the image:
    the pixel-shift context transform of the spatial-momentum attacks.
    """
    h, w = x.shape[-2], x.shape[-1]
    if h != spec.target_size or w != spec.target_size:
        raise ConfigError(
            f"image side {h}x{w} does not match spec target {spec.target_size}"
        )
    p = int(rng.integers(spec.pad_min, spec.pad_max))
    top = int(rng.integers(0, p - h + 1))
    left = int(rng.integers(0, p - w + 1))
    canvas = np.zeros(x.shape[:-2] + (p, p), dtype=x.dtype)
    canvas[..., top : top + h, left : left + w] = x
    out = bilinear_resize(canvas, h, w)
    return np.clip(out, 0.0, 1.0)


def diverse_input(x: np.ndarray, prob: float, rng, canvas_scale: float = 1.1) -> np.ndarray:
    """DI transform: with probability `prob`, random resize + random pad.

    Resizes to a random side in [target, target*canvas_scale), pads
    randomly out to the fixed enlarged canvas, then resizes back to the
    original side. Consumes no randomness when prob == 0.
    """
    if not 0.0 <= prob <= 1.0:
        raise ConfigError("diverse_input prob must lie in [0,1]")
    if prob == 0.0:
        return x
    if rng.random() >= prob:
        return x
    h, w = x.shape[-2], x.shape[-1]
    big = max(int(round(h * canvas_scale)), h + 1)
    r = int(rng.integers(h, big))
    resized = bilinear_resize(x, r, r)
    top = int(rng.integers(0, big - r + 1))
    left = int(rng.integers(0, big - r + 1))
    canvas = np.zeros(x.shape[:-2] + (big, big), dtype=x.dtype)
    canvas[..., top : top + r, left : left + r] = resized
    return np.clip(bilinear_resize(canvas, h, w), 0.0, 1.0)


@dataclass(frozen=True)
class TiKernel:
    """Normalized 2-D Gaussian used to smooth gradients (TI attack)."""

    size: int
    sigma: float
    weights: np.ndarray

    def __post_init__(self):
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ConfigError("TI kernel weights must sum to 1")
        if not np.allclose(self.weights, self.weights[::-1, ::-1], atol=0):
            raise ConfigError("TI kernel must be symmetric under 180-degree rotation")


def make_ti_kernel(size: int, sigma: float) -> TiKernel:
    if size < 1 or size % 2 == 0:
        raise ConfigError("TI kernel size must be odd and positive")
    if sigma <= 0:
        raise ConfigError("TI kernel sigma must be > 0")
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return TiKernel(size, sigma, k / k.sum())


def ti_smooth(grad: np.ndarray, kernel: TiKernel) -> np.ndarray:
    """Same-size zero-padded convolution of each channel with the kernel."""
    if kernel.size == 1:
        return grad * float(kernel.weights[0, 0])
    lead = grad.shape[:-2]
    h, w = grad.shape[-2:]
    flat = grad.reshape(int(np.prod(lead)) if lead else 1, 1, h, w)
    # 180-degree symmetry makes cross-correlation equal to convolution
    out = T.conv2d(
        Tensor(flat), Tensor(kernel.weights[None, None]), stride=1, padding=kernel.size // 2
    ).data
    return out.reshape(grad.shape)


def scale_copies(x: np.ndarray, m: int) -> list:
    """Scale-invariance copies x / 2^i for i = 0..m-1."""
    if m < 1:
        raise UsageError("scale_copies needs m >= 1")
    return [x / (2.0**i) for i in range(m)]


def bit_depth_reduce(x: np.ndarray, bits: int) -> np.ndarray:
    """Quantize pixels to 2^bits levels (the BIT input-transform defense)."""
    if not 1 <= bits <= 8:
        raise ConfigError("bit_depth_reduce needs 1 <= bits <= 8")
    levels = float(2**bits - 1)
    return np.rint(np.clip(x, 0.0, 1.0) * levels) / levels
