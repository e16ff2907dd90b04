"""Feedback U-Net generators with saliency gating and embedding fusion.

Layout for the default 7-level configuration (3 encoder levels, a bottleneck,
3 decoder levels)::

    stem 3->32 | enc1 32->64 | enc2 64->128 | enc3 128->256
        | bottleneck (256 + 256 fused embedding) -> 512
        | feedback (ConvLSTM + dilated dense blocks), unrolled N times
        | dec3 512->256 | dec2 256->128 | dec1 128->64 | head 64->3

The encoder levels run once per image.  Bottleneck, feedback block and decoder
run once per feedback iteration, because the bottleneck consumes the embedding
of the previous iteration's output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError
from .semantics import EMBED_DIM, project_and_fuse
from .tonemap import ToneMapParams, mu_law

DIRECTIONS = ("ldr_to_hdr", "hdr_to_ldr")


@dataclass
class GeneratorConfig:
    levels: int = 7
    base_channels: int = 32
    max_channels: int = 512
    feedback_iterations: int = 4
    dilation_rate: int = 3
    dilated_blocks: int = 3
    direction: str = "ldr_to_hdr"
    feedback_channels: int = 64
    dense_layers: int = 2
    embedding_dim: int = EMBED_DIM
    # block gradients into the encoder for feedback iterations after the first
    freeze_encoder: bool = False
    mu: float = 5000.0

    def __post_init__(self):
        if self.levels < 3 or self.levels % 2 == 0:
            raise ValueError(f"levels must be odd and >= 3, got {self.levels}")
        if self.feedback_iterations < 1:
            raise ValueError("feedback_iterations must be >= 1")
        if self.base_channels < 1 or self.max_channels < self.base_channels:
            raise ValueError("need 1 <= base_channels <= max_channels")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.dilated_blocks < 0 or self.dilation_rate < 1 or self.dense_layers < 1:
            raise ValueError("invalid feedback block settings")

    @property
    def depth(self) -> int:
        """Encoder levels including the bottleneck."""
        return (self.levels + 1) // 2

    @property
    def encoder_channels(self) -> list[int]:
        return [min(self.base_channels * 2 ** i, self.max_channels) for i in range(1, self.depth + 1)]

    @property
    def level_channels(self) -> list[int]:
        """Output channels of all U-Net levels, encoder to decoder."""
        enc = self.encoder_channels
        return enc + enc[-2::-1]

    @property
    def fused_dim(self) -> int:
        return self.encoder_channels[-2]

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.depth - 1)


@dataclass
class SaliencyTriplet:
    """Artifact / over-exposure / under-exposure maps, each B x 1 x H x W in [0, 1]."""

    artifact: torch.Tensor
    over: torch.Tensor
    under: torch.Tensor

    @classmethod
    def neutral(cls, batch: int, h: int, w: int, dtype=torch.float32, device=None) -> "SaliencyTriplet":
        ones = torch.ones(batch, 1, h, w, dtype=dtype, device=device)
        return cls(ones, ones, ones)

    @classmethod
    def stack(cls, maps: list[tuple[np.ndarray, np.ndarray, np.ndarray]], dtype=torch.float32, device=None):
        def t(i):
            return torch.stack([torch.as_tensor(np.asarray(m[i]), dtype=dtype) for m in maps])[:, None].to(device)

        return cls(t(0), t(1), t(2))


@dataclass
class FusionInputs:
    """Side inputs of a generator call.

    ``saliency=None`` disables gating; ``input_embedding=None`` disables
    semantic injection (the fused embedding is then zero at every iteration).
    """

    saliency: Optional[SaliencyTriplet] = None
    input_embedding: Optional[torch.Tensor] = None


def gate_features(features: torch.Tensor, saliency_map: torch.Tensor) -> torch.Tensor:
    """features * bilinear_resize(map); map broadcasts over channels."""
    if saliency_map.dim() == 2:
        saliency_map = saliency_map[None, None]
    elif saliency_map.dim() == 3:
        saliency_map = saliency_map[None]
    h, w = features.shape[-2:]
    if saliency_map.shape[-2:] != (h, w):
        saliency_map = F.interpolate(saliency_map, size=(h, w), mode="bilinear", align_corners=False)
    if features.dim() == 3:
        return features * saliency_map[0]
    return features * saliency_map


class SaliencyProjection(nn.Module):
    """Lifts a one-channel map to C gating channels: m * (1 + W(m - 1)).

    A map of ones gives exactly ones and a map of zeros exactly zeros, for
    any weights.  W starts at zero, i.e. as plain multiplicative gating.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(1, channels, 1, bias=False)
        nn.init.zeros_(self.proj.weight)

    def forward(self, features: torch.Tensor, saliency_map: torch.Tensor) -> torch.Tensor:
        h, w = features.shape[-2:]
        m = saliency_map
        if m.shape[-2:] != (h, w):
            m = F.interpolate(m, size=(h, w), mode="bilinear", align_corners=False)
        return gate_features(features, m * (1.0 + self.proj(m - 1.0)))


class DoubleConv(nn.Sequential):
    def __init__(self, c_in: int, c_out: int):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.BatchNorm2d(c_out),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.BatchNorm2d(c_out),
        )


class ConvLSTMCell(nn.Module):
    def __init__(self, c_in: int, c_hidden: int):
        super().__init__()
        self.c_hidden = c_hidden
        self.gates = nn.Conv2d(c_in + c_hidden, 4 * c_hidden, 3, padding=1)

    def forward(self, x, state):
        h, c = state
        i, f, o, g = self.gates(torch.cat([x, h], dim=1)).chunk(4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class DilatedDenseBlock(nn.Module):
    def __init__(self, channels: int, growth: int, layers: int, dilation: int):
        super().__init__()
        self.compress_in = nn.Conv2d(channels, growth, 1)
        self.layers = nn.ModuleList(
            nn.Conv2d(growth * (k + 1), growth, 3, padding=dilation, dilation=dilation) for k in range(layers)
        )
        self.compress_out = nn.Conv2d(growth * (layers + 1), channels, 1)

    def forward(self, x):
        feats = [self.compress_in(x)]
        for conv in self.layers:
            feats.append(F.relu(conv(torch.cat(feats, dim=1))))
        return x + self.compress_out(torch.cat(feats, dim=1))


class FeedbackBlock(nn.Module):
    """1x1 compression, ConvLSTM, dilated dense blocks, 3x3 expansion."""

    def __init__(self, channels: int, hidden: int, blocks: int, dense_layers: int, dilation: int):
        super().__init__()
        self.hidden = hidden
        self.compress = nn.Conv2d(channels, hidden, 1)
        self.lstm = ConvLSTMCell(hidden, hidden)
        self.blocks = nn.Sequential(
            *[DilatedDenseBlock(hidden, max(hidden // 2, 1), dense_layers, dilation) for _ in range(blocks)]
        )
        self.expand = nn.Conv2d(hidden, channels, 3, padding=1)

    def init_state(self, x):
        b, _, h, w = x.shape
        z = x.new_zeros(b, self.hidden, h, w)
        return z, z

    def forward(self, x, state):
        h, c = self.lstm(self.compress(x), state)
        out = x + self.expand(self.blocks(h))
        return out, (h, c)


class FeedbackUNet(nn.Module):
    MAX_MU_CODE = 2.0  # caps HDR output at about mu^2 times the peak

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder_channels
        d = cfg.depth
        self.stem = nn.Sequential(nn.Conv2d(3, cfg.base_channels, 3, padding=1), nn.ReLU(inplace=True))
        self.encoder = nn.ModuleList(
            [DoubleConv(cfg.base_channels, enc[0])] + [DoubleConv(enc[i - 1], enc[i]) for i in range(1, d - 1)]
        )
        self.embed_proj = nn.Linear(cfg.embedding_dim, cfg.fused_dim, bias=False)
        self.bottleneck = DoubleConv(enc[d - 2] + cfg.fused_dim, enc[d - 1])
        self.feedback = FeedbackBlock(enc[d - 1], cfg.feedback_channels, cfg.dilated_blocks,
                                      cfg.dense_layers, cfg.dilation_rate)
        self.up = nn.ModuleList(nn.ConvTranspose2d(enc[i + 1], enc[i], 2, stride=2) for i in range(d - 2, -1, -1))
        self.decoder = nn.ModuleList(DoubleConv(2 * enc[i], enc[i]) for i in range(d - 2, -1, -1))
        self.head = nn.Conv2d(enc[0], 3, 1)

        self.gate_artifact = SaliencyProjection(enc[d - 1])
        if self.hdr_output:
            self.gate_over = SaliencyProjection(enc[d - 2])
            self.gate_under = nn.ModuleList(SaliencyProjection(c) for c in enc[: d - 1])

    @property
    def hdr_output(self) -> bool:
        return self.cfg.direction == "ldr_to_hdr"

    def to_display(self, out: torch.Tensor) -> torch.Tensor:
        """Map an output to display range for the embedding encoder."""
        if self.hdr_output:
            return mu_law(out, ToneMapParams(self.cfg.mu), check=False)
        return out

    def _hdr_activation(self, z):
        # softplus in the mu-law domain, then back to linear radiance; a plain
        # softplus would need pre-activations near -5 for typical peak-relative
        # radiance and trains very slowly
        t = F.softplus(z).clamp(max=self.MAX_MU_CODE)
        return torch.expm1(t * math.log1p(self.cfg.mu)) / self.cfg.mu

    def _encode_input(self, img):
        if not self.hdr_output:
            # HDR input: compress heavy tails before the first convolution
            img = mu_law(img.clamp_min(0.0), ToneMapParams(self.cfg.mu), check=False)
        return 2.0 * img - 1.0

    def forward(self, img: torch.Tensor, fusion: Optional[FusionInputs] = None, embedder=None,
                carry_state: bool = True, hooks: Optional[dict] = None):
        """Returns ``(output, per_iteration_outputs)``.

        ``hooks``, when a dict, receives intermediate activations
        (``feedback_input`` per iteration) for inspection.
        """
        fusion = fusion or FusionInputs()
        cfg = self.cfg
        b, c, h, w = img.shape
        m = cfg.size_multiple
        if c != 3 or h % m or w % m:
            raise ShapeError(f"input must be B x 3 x H x W with H, W divisible by {m}, got {tuple(img.shape)}")
        sal = fusion.saliency
        if sal is not None:
            for name in ("artifact", "over", "under"):
                if getattr(sal, name).shape[-2:] != (h, w):
                    raise ShapeError(f"{name} map size {tuple(getattr(sal, name).shape[-2:])} != image {(h, w)}")
        if fusion.input_embedding is not None and embedder is None:
            raise ValueError("an embedder is required when an input embedding is supplied")

        # encoder: runs once
        x = self.stem(self._encode_input(img))
        skips = []
        for i, level in enumerate(self.encoder):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = level(x)
            skips.append(x)
        pre_bottleneck = F.max_pool2d(x, 2)
        if sal is not None and self.hdr_output:
            skips = [g(s, sal.under) for g, s in zip(self.gate_under, skips)]
            pre_bottleneck = self.gate_over(pre_bottleneck, sal.over)

        state = None
        outputs = []
        out = None
        for k in range(cfg.feedback_iterations):
            skips_k, pre_k = skips, pre_bottleneck
            if cfg.freeze_encoder and k > 0:
                skips_k = [s.detach() for s in skips]
                pre_k = pre_bottleneck.detach()

            if fusion.input_embedding is None:
                fused = pre_k.new_zeros(b, cfg.fused_dim)
            else:
                e_in = fusion.input_embedding.to(pre_k.dtype)
                e_out = torch.zeros_like(e_in) if out is None else embedder(self.to_display(out)).to(pre_k.dtype)
                fused = project_and_fuse(self.embed_proj, e_in, e_out)
            hb, wb = pre_k.shape[-2:]
            z = self.bottleneck(torch.cat([pre_k, fused[:, :, None, None].expand(-1, -1, hb, wb)], dim=1))
            if sal is not None:
                z = self.gate_artifact(z, sal.artifact)
            if hooks is not None:
                hooks.setdefault("feedback_input", []).append(z)

            if state is None or not carry_state:
                state = self.feedback.init_state(z)
            y, state = self.feedback(z, state)
            for up, dec, skip in zip(self.up, self.decoder, reversed(skips_k)):
                y = dec(torch.cat([up(y), skip], dim=1))
            y = self.head(y)
            out = self._hdr_activation(y) if self.hdr_output else torch.sigmoid(y)
            outputs.append(out)
        return out, outputs


def build_generator(cfg: GeneratorConfig, seed: Optional[int] = None) -> FeedbackUNet:
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return FeedbackUNet(cfg)
    return FeedbackUNet(cfg)


def generator_forward(model: FeedbackUNet, img: torch.Tensor, fusion: Optional[FusionInputs] = None,
                      embedder=None):
    return model(img, fusion, embedder)
