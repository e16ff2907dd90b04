"""Synthetic scenes for smoke tests and desk-scale experiments.

A scene is a smooth coloured background with a few rectangles and bright
Gaussian light sources.  LDR views are exposed, gamma-encoded, clipped and
quantised to 8 bits.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .imagecore.dataset import PairedDataset, UnpairedDataset
from .imagecore.io import save_image
from .imagecore.types import HdrImage, LdrImage


def hdr_scene(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    base = rng.uniform(0.02, 0.25, 3)
    tilt = rng.uniform(-0.15, 0.15, (2, 3))
    img = base + xx[..., None] * tilt[0] + yy[..., None] * tilt[1]
    img = np.clip(img, 0.005, None)
    for _ in range(rng.integers(1, 4)):
        y0, x0 = rng.integers(0, size - 8, 2)
        h, w = rng.integers(6, size // 2, 2)
        img[y0:y0 + h, x0:x0 + w] = rng.uniform(0.02, 0.6, 3)
    for _ in range(rng.integers(1, 3)):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        r = rng.uniform(0.03, 0.12)
        peak = rng.uniform(4.0, 40.0)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r**2))
        img = img + peak * blob[..., None] * rng.uniform(0.7, 1.0, 3)
    return img.astype(np.float32)


def ldr_from_hdr(hdr: np.ndarray, exposure: float = 1.0, gamma: float = 2.2) -> np.ndarray:
    ldr = np.clip(hdr * exposure, 0.0, 1.0) ** (1.0 / gamma)
    return (np.round(ldr * 255.0) / 255.0).astype(np.float32)


def make_unpaired(n_ldr: int = 8, n_hdr: int = 8, size: int = 64, seed: int = 0,
                  batch_size: int = 4) -> UnpairedDataset:
    """In-memory unpaired set; LDR and HDR images come from different scenes."""
    rng = np.random.default_rng(seed)
    ldr = [LdrImage(ldr_from_hdr(hdr_scene(rng, size), rng.uniform(0.5, 3.0))) for _ in range(n_ldr)]
    hdr = [HdrImage(hdr_scene(rng, size)) for _ in range(n_hdr)]
    return UnpairedDataset(ldr, hdr, seed=seed, batch_size=batch_size, image_size=(size, size))


def make_paired(n: int = 4, size: int = 64, seed: int = 100) -> PairedDataset:
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        hdr = hdr_scene(rng, size)
        pairs.append((LdrImage(ldr_from_hdr(hdr, rng.uniform(0.5, 3.0))), HdrImage(hdr)))
    return PairedDataset(pairs, (size, size))


def write_tree(root, n_ldr: int = 8, n_hdr: int = 8, size: int = 64, seed: int = 0,
               paired: bool = False) -> Path:
    """Write ``<root>/ldr/*.png`` and ``<root>/hdr/*.pfm``.

    With ``paired=True`` image k of both folders shows the same scene and the
    file stems match, which is the layout evaluation expects.
    """
    root = Path(root)
    (root / "ldr").mkdir(parents=True, exist_ok=True)
    (root / "hdr").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    if paired:
        for k in range(n_ldr):
            hdr = hdr_scene(rng, size)
            save_image(LdrImage(ldr_from_hdr(hdr, rng.uniform(0.5, 3.0))), root / "ldr" / f"img{k:03d}.png")
            save_image(HdrImage(hdr), root / "hdr" / f"img{k:03d}.pfm")
        return root
    for k in range(n_ldr):
        ldr = ldr_from_hdr(hdr_scene(rng, size), rng.uniform(0.5, 3.0))
        save_image(LdrImage(ldr), root / "ldr" / f"ldr{k:03d}.png")
    for k in range(n_hdr):
        save_image(HdrImage(hdr_scene(rng, size)), root / "hdr" / f"hdr{k:03d}.pfm")
    return root
