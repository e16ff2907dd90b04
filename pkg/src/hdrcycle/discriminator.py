"""Five-layer patch discriminator."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn

from .errors import ShapeError

MIN_INPUT = 64


@dataclass
class DiscriminatorConfig:
    layers: int = 5
    kernel: int = 4
    strides: list[int] = field(default_factory=lambda: [2, 2, 2, 1, 1])
    channels: list[int] = field(default_factory=lambda: [64, 128, 256, 512, 1])
    padding: int = 1
    negative_slope: float = 0.2

    def __post_init__(self):
        if len(self.strides) != self.layers or len(self.channels) != self.layers:
            raise ValueError("strides and channels must list one entry per layer")
        if self.kernel < 1 or any(s < 1 for s in self.strides) or any(c < 1 for c in self.channels):
            raise ValueError("kernel, strides and channels must be positive")


def output_size(size: int, cfg: DiscriminatorConfig) -> int:
    for s in cfg.strides:
        size = (size + 2 * cfg.padding - cfg.kernel) // s + 1
    return size


class PatchDiscriminator(nn.Module):
    """Conv-LeakyReLU stack, BN after every conv but the first, sigmoid output."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        mods = []
        c_in = 3
        for i, (c, s) in enumerate(zip(cfg.channels, cfg.strides)):
            mods.append(nn.Conv2d(c_in, c, cfg.kernel, stride=s, padding=cfg.padding))
            if i > 0:
                mods.append(nn.BatchNorm2d(c))
            if i < cfg.layers - 1:
                mods.append(nn.LeakyReLU(cfg.negative_slope, inplace=True))
            c_in = c
        mods.append(nn.Sigmoid())
        self.net = nn.Sequential(*mods)

    def convs(self) -> list[nn.Conv2d]:
        return [m for m in self.net if isinstance(m, nn.Conv2d)]

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        h, w = img.shape[-2:]
        if h < MIN_INPUT or w < MIN_INPUT:
            raise ShapeError(f"discriminator input must be at least {MIN_INPUT}x{MIN_INPUT}, got {(h, w)}")
        return self.net(img)


def build_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig(), seed: Optional[int] = None):
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return PatchDiscriminator(cfg)
    return PatchDiscriminator(cfg)


def d_forward(model: PatchDiscriminator, img: torch.Tensor) -> torch.Tensor:
    return model(img)
