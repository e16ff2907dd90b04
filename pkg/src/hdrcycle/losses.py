"""Training objectives.  Every term is a standalone function; ``total_loss``
combines whichever terms are enabled."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .errors import BatchError, ShapeError
from .semantics import SegMask, miou
from .tonemap import ToneMapParams, mu_law

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_cyc: float = 10.0
    id_weight: float = 0.5
    alpha: float = 2.0  # contrastive
    beta: float = 2.0  # semantic
    delta1: float = 3.0  # artifact pixels
    delta2: float = 2.0  # over-exposed pixels
    delta3: float = 1.5  # under-exposed pixels
    tau: float = 0.08
    llm_weight: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")


@dataclass(frozen=True)
class LossSwitches:
    """Ablation switches; all on reproduces the full objective."""

    adversarial: bool = True
    cycle: bool = True
    identity: bool = True
    contrastive: bool = True
    semantic: bool = True
    llm: bool = True


def _same_shape(*pairs):
    for a, b in pairs:
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def llm_loss(fractions, w: LossWeights = LossWeights()):
    """delta1 * f_af + delta2 * f_ox + delta3 * f_ux.

    ``fractions`` is a (..., 3) tensor or a 3-sequence of flagged-pixel
    fractions; batched input is averaged over the leading dimension.
    """
    f = fractions if isinstance(fractions, torch.Tensor) else torch.tensor(fractions, dtype=torch.float64)
    deltas = f.new_tensor([w.delta1, w.delta2, w.delta3])
    per_sample = (f * deltas).sum(dim=-1)
    return per_sample.mean() if per_sample.dim() else per_sample


def llm_loss_counts(counts: Sequence[int], w: LossWeights = LossWeights()) -> float:
    """Reporting variant on hard pixel counts (n_af, n_ox, n_ux, n_total)."""
    n_af, n_ox, n_ux, n = counts
    return (w.delta1 * n_af + w.delta2 * n_ox + w.delta3 * n_ux) / n


def contrastive_loss(x_embs: torch.Tensor, y_embs: torch.Tensor, tau: float = 0.08) -> torch.Tensor:
    """Batch contrastive loss with positives (x_i, y_i) and negatives
    (x_i, x_j), (x_i, y_j) for j != i.  The positive is not part of the
    denominator, so the value can be negative."""
    if x_embs.shape != y_embs.shape or x_embs.dim() != 2:
        raise ShapeError("embeddings must be two N x D tensors of equal shape")
    n = x_embs.shape[0]
    if n < 2:
        raise BatchError("contrastive loss needs a batch of at least 2")
    xn = F.normalize(x_embs, dim=1)
    yn = F.normalize(y_embs, dim=1)
    s_xx = xn @ xn.T / tau
    s_xy = xn @ yn.T / tau
    pos = s_xy.diagonal()
    off = ~torch.eye(n, dtype=torch.bool, device=x_embs.device)
    neg = torch.cat([s_xx[off].view(n, n - 1), s_xy[off].view(n, n - 1)], dim=1)
    return (torch.logsumexp(neg, dim=1) - pos).mean()


def semantic_loss(mask_a: SegMask, mask_b: SegMask) -> float:
    if mask_a.shape != mask_b.shape:
        raise ShapeError(f"mask shapes differ: {mask_a.shape} vs {mask_b.shape}")
    return 1.0 - miou(mask_a, mask_b)


def adversarial_losses(d_real: torch.Tensor, d_fake: torch.Tensor, saturating: bool = False):
    """(discriminator loss, generator loss) from probability maps.

    The generator term is -log D(fake); ``saturating=True`` gives
    log(1 - D(fake)) instead, the literal min-max form.
    """
    d_real = d_real.clamp(EPS, 1 - EPS)
    d_fake_c = d_fake.clamp(EPS, 1 - EPS)
    d_loss = -torch.log(d_real).mean() - torch.log1p(-d_fake_c).mean()
    return d_loss, generator_adversarial_loss(d_fake, saturating)


def generator_adversarial_loss(d_fake: torch.Tensor, saturating: bool = False) -> torch.Tensor:
    d_fake = d_fake.clamp(EPS, 1 - EPS)
    if saturating:
        return torch.log1p(-d_fake).mean()
    return -torch.log(d_fake).mean()


def cycle_loss(x, x_rt, y, y_rt, tm: ToneMapParams = ToneMapParams()):
    """L1 on the LDR round trip plus L1 on the mu-law HDR round trip."""
    _same_shape((x, x_rt), (y, y_rt))
    return (x_rt - x).abs().mean() + (mu_law(y_rt, tm, check=False) - mu_law(y, tm, check=False)).abs().mean()


def identity_loss(gY_on_y, y, gX_on_x, x, tm: ToneMapParams = ToneMapParams()):
    _same_shape((gY_on_y, y), (gX_on_x, x))
    hdr = (mu_law(gY_on_y, tm, check=False) - mu_law(y, tm, check=False)).abs().mean()
    return hdr + (gX_on_x - x).abs().mean()


PART_NAMES = ("gan_gy", "gan_gx", "cyc", "id", "con", "sem", "llm")


def total_loss(parts: Mapping[str, object], w: LossWeights = LossWeights(),
               switches: LossSwitches = LossSwitches()):
    """Weighted sum; missing or switched-off parts contribute nothing."""

    def get(name, on):
        return parts.get(name, 0.0) if on else 0.0

    total = get("gan_gy", switches.adversarial) + get("gan_gx", switches.adversarial)
    cyc = get("cyc", switches.cycle)
    idt = get("id", switches.identity)
    total = total + w.lambda_cyc * (cyc + w.id_weight * idt)
    total = total + w.alpha * get("con", switches.contrastive)
    total = total + w.beta * get("sem", switches.semantic)
    total = total + w.llm_weight * get("llm", switches.llm)
    return total
