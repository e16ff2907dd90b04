from __future__ import annotations

import cv2
import numpy as np

from .types import MIN_SIDE, HdrImage, LdrImage

_INTERPOLATION = {
    "bilinear": cv2.INTER_LINEAR,
    "nearest": cv2.INTER_NEAREST,
    "area": cv2.INTER_AREA,
    "bicubic": cv2.INTER_CUBIC,
}


def equalize_channel(channel: np.ndarray) -> np.ndarray:
    """256-bin CDF remap of one uint8 channel.

    lut[v] = round(255 * (cdf(v) - cdf_min) / (N - cdf_min)); a single-valued
    channel is returned unchanged.
    """
    hist = np.bincount(channel.ravel(), minlength=256)
    total = channel.size
    cdf = np.cumsum(hist)
    cdf_min = cdf[np.flatnonzero(hist)[0]]
    if cdf_min == total:
        return channel.copy()
    lut = np.round((cdf - cdf_min) * (255.0 / (total - cdf_min)))
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    return lut[channel]


def equalize_array(pixels: np.ndarray) -> np.ndarray:
    """Per-channel histogram equalisation of an H x W x C float array in [0, 1]."""
    q = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    out = np.empty(q.shape, dtype=np.float32)
    for c in range(q.shape[-1]):
        out[..., c] = equalize_channel(q[..., c]) / 255.0
    return out


def equalize_histogram(img: LdrImage) -> LdrImage:
    q = np.round(img.pixels * 255.0).astype(np.uint8)
    if all(np.unique(q[..., c]).size == 1 for c in range(3)):
        # constant per channel: nothing to spread, keep exact input values
        return img
    return LdrImage(equalize_array(img.pixels), img.source_bit_depth)


def synthesize_exposure(img: LdrImage, gain: float, bias: float = 0.0) -> LdrImage:
    """Simulated re-exposure: clip(gain * in + bias, 0, 1)."""
    if not gain > 0:
        raise ValueError(f"gain must be positive, got {gain}")
    out = np.clip(gain * img.pixels + bias, 0.0, 1.0)
    return LdrImage(out, img.source_bit_depth)


def resize_array(pixels: np.ndarray, size: tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    h, w = size
    if h <= 0 or w <= 0:
        raise ValueError(f"target size must be positive, got {size}")
    if pixels.shape[:2] == (h, w):
        return pixels.copy()
    out = cv2.resize(np.asarray(pixels, dtype=np.float32), (w, h), interpolation=_INTERPOLATION[mode])
    if out.ndim == 2 and pixels.ndim == 3:
        out = out[..., None]
    return out


def resize(img, size: tuple[int, int], mode: str = "bilinear"):
    """Resize an LdrImage or HdrImage to ``size = (H, W)``."""
    h, w = size
    if h <= 0 or w <= 0:
        raise ValueError(f"target size must be positive, got {size}")
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"target size must be at least {MIN_SIDE}x{MIN_SIDE}, got {size}")
    out = resize_array(img.pixels, size, mode)
    if isinstance(img, LdrImage):
        return LdrImage(np.clip(out, 0.0, 1.0), img.source_bit_depth)
    # bicubic can undershoot below zero
    return HdrImage(np.maximum(out, 0.0))
