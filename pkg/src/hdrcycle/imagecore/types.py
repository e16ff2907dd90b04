from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ImageFormatError

MIN_SIDE = 16


def _check_layout(pixels: np.ndarray) -> None:
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ImageFormatError(f"expected H x W x 3 pixels, got shape {pixels.shape}")
    if pixels.shape[0] < MIN_SIDE or pixels.shape[1] < MIN_SIDE:
        raise ImageFormatError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {pixels.shape[:2]}")
    if not np.all(np.isfinite(pixels)):
        raise ImageFormatError("image contains NaN or Inf")


@dataclass(frozen=True)
class LdrImage:
    """Display-referred image, H x W x 3 float32 in [0, 1]."""

    pixels: np.ndarray
    source_bit_depth: int = 8

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        _check_layout(px)
        if px.min() < 0.0 or px.max() > 1.0:
            raise ImageFormatError("LDR pixels must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class HdrImage:
    """Linear relative radiance, H x W x 3 non-negative float32."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        _check_layout(px)
        if px.min() < 0.0:
            raise ImageFormatError("HDR pixels must be non-negative")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape
