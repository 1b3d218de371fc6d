"""Raster utilities: bicubic upsampling, block pooling, 8-bit conversion.

The bicubic path is written out longhand instead of delegating to an image
library because the kernel parameter must be a = -0.5 (the Keys kernel) with
half-pixel sample alignment; common libraries default to other conventions.
"""

from __future__ import annotations

import numpy as np

from .annotations import round_half_up

__all__ = [
    "bicubic_kernel",
    "bicubic_upsample",
    "area_downsample",
    "block_any_pool",
    "to_uint8",
    "from_uint8",
]


def bicubic_kernel(x, a: float = -0.5):
    """Keys cubic convolution kernel, piecewise over |x| in [0,1], [1,2]."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    near = x <= 1.0
    far = (x > 1.0) & (x < 2.0)
    out[near] = (a + 2.0) * x[near] ** 3 - (a + 3.0) * x[near] ** 2 + 1.0
    out[far] = a * x[far] ** 3 - 5.0 * a * x[far] ** 2 + 8.0 * a * x[far] - 4.0 * a
    return out


def _axis_weights(n_in: int, scale: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-output-pixel source indices (clamped) and kernel weights for one axis."""
    n_out = n_in * scale
    # Half-pixel alignment: output center j maps to source coordinate
    # (j + 0.5) / scale - 0.5.
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / scale - 0.5
    base = np.floor(src).astype(np.int64)
    taps = base[:, None] + np.arange(-1, 3)[None, :]
    weights = bicubic_kernel(src[:, None] - taps)
    taps = np.clip(taps, 0, n_in - 1)
    return taps, weights


def bicubic_upsample(image: np.ndarray, scale: int) -> np.ndarray:
    """Upsample H x W (x C) by an integer factor with the a=-0.5 cubic kernel.

    Edges replicate the border sample.  scale == 1 returns an exact copy.
    """
    if scale < 1 or int(scale) != scale:
        raise ValueError(f"scale must be a positive integer, got {scale}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ValueError("expected an HxW or HxWxC array")
    if scale == 1:
        return img.copy()
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, _ = img.shape

    taps_y, wy = _axis_weights(h, scale)
    taps_x, wx = _axis_weights(w, scale)
    # Separable: rows first, then columns.
    rows = np.einsum("itwc,it->iwc", img[taps_y, :, :], wy)
    out = np.einsum("ijtc,jt->ijc", rows[:, taps_x, :], wx)
    return out[:, :, 0] if squeeze else out


def area_downsample(image: np.ndarray, scale: int) -> np.ndarray:
    """Average non-overlapping scale x scale blocks; sides must divide evenly."""
    if scale < 1 or int(scale) != scale:
        raise ValueError(f"scale must be a positive integer, got {scale}")
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    if h % scale or w % scale:
        raise ValueError(f"image {h}x{w} not divisible by scale {scale}")
    if scale == 1:
        out = img.copy()
    else:
        out = img.reshape(h // scale, scale, w // scale, scale, c).mean(axis=(1, 3))
    return out[:, :, 0] if squeeze else out


def block_any_pool(mask: np.ndarray, factor: int) -> np.ndarray:
    """Reduce a boolean H x W mask by ``factor``: a block is True if any pixel is.

    This is the pixel-mask to latent-grid rule; it errs toward inclusion so a
    partially covered latent cell is treated as masked.
    """
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValueError("expected an HxW boolean mask")
    h, w = m.shape
    if h % factor or w % factor:
        raise ValueError(f"mask {h}x{w} not divisible by factor {factor}")
    return m.reshape(h // factor, factor, w // factor, factor).any(axis=(1, 3))


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to uint8 with round-half-up semantics."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def from_uint8(image: np.ndarray) -> np.ndarray:
    """Map uint8 back to [0, 1] floats."""
    return np.asarray(image, dtype=np.float64) / 255.0


def clip_unit(image: np.ndarray) -> np.ndarray:
    """Clip to the unit interval without copying when already inside."""
    return np.clip(image, 0.0, 1.0)


def resize_area(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Box-filter resize to an arbitrary (possibly non-divisor) target size.

    Each output pixel averages the source pixels whose centers fall in its
    footprint, weighted by overlap.  Used for fixed-size pooled features where
    input sizes vary; exact reshape-mean is used when the ratio is integral.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise ValueError("target size must be positive")
    if h % oh == 0 and w % ow == 0 and h // oh == w // ow:
        out = area_downsample(img, h // oh)
        return out[:, :, 0] if squeeze else out
    out = np.empty((oh, ow, c), dtype=np.float64)
    ys = np.linspace(0.0, h, oh + 1)
    xs = np.linspace(0.0, w, ow + 1)
    for i in range(oh):
        y0, y1 = ys[i], ys[i + 1]
        iy0, iy1 = int(np.floor(y0)), int(np.ceil(y1))
        wy = np.minimum(np.arange(iy0, iy1) + 1.0, y1) - np.maximum(np.arange(iy0, iy1), y0)
        for j in range(ow):
            x0, x1 = xs[j], xs[j + 1]
            ix0, ix1 = int(np.floor(x0)), int(np.ceil(x1))
            wx = np.minimum(np.arange(ix0, ix1) + 1.0, x1) - np.maximum(np.arange(ix0, ix1), x0)
            block = img[iy0:iy1, ix0:ix1, :]
            out[i, j, :] = np.einsum("y,x,yxc->c", wy, wx, block) / ((y1 - y0) * (x1 - x0))
    return out[:, :, 0] if squeeze else out
