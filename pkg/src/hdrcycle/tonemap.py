"""Tone-mapping operators shared by the losses, the discriminators and the CLI.

All operators accept numpy arrays or torch tensors and return the same kind.
The torch path is differentiable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_MU = 5000.0


@dataclass(frozen=True)
class ToneMapParams:
    mu: float = DEFAULT_MU

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")


def _check_nonnegative(y):
    if isinstance(y, torch.Tensor):
        bad = bool((y < 0).any())
    else:
        bad = bool(np.any(np.asarray(y) < 0))
    if bad:
        raise ValueError("tone mapping input must be non-negative")


def mu_law(y, params: ToneMapParams = ToneMapParams(), check: bool = True):
    """ln(1 + mu*y) / ln(1 + mu).

    Values above 1 are allowed and map above 1; callers that need a [0, 1]
    result peak-normalise first (see :func:`peak_normalize`).
    """
    if check:
        _check_nonnegative(y)
    denom = math.log1p(params.mu)
    if isinstance(y, torch.Tensor):
        return torch.log1p(params.mu * y) / denom
    return np.log1p(params.mu * np.asarray(y)) / denom


def inverse_mu_law(t, params: ToneMapParams = ToneMapParams()):
    if isinstance(t, torch.Tensor):
        if bool(((t < 0) | (t > 1)).any()):
            raise ValueError("inverse mu-law input must lie in [0, 1]")
        return torch.expm1(t * math.log1p(params.mu)) / params.mu
    t = np.asarray(t)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("inverse mu-law input must lie in [0, 1]")
    return np.expm1(t * math.log1p(params.mu)) / params.mu


def reinhard(y):
    """Global Reinhard operator y / (1 + y)."""
    _check_nonnegative(y)
    if isinstance(y, torch.Tensor):
        return y / (1.0 + y)
    y = np.asarray(y)
    return y / (1.0 + y)


def peak_normalize(y, eps: float = 1e-12):
    """Scale an HDR image (or a batch, per sample) so its maximum is 1.

    Returns ``(normalized, scale)`` with ``normalized * scale == y``.
    """
    if isinstance(y, torch.Tensor):
        if y.dim() == 4:
            scale = y.detach().flatten(1).amax(dim=1).clamp_min(eps)
            return y / scale.view(-1, 1, 1, 1), scale
        scale = y.detach().max().clamp_min(eps)
        return y / scale, scale
    y = np.asarray(y)
    scale = max(float(y.max()), eps)
    return y / scale, scale


def display(y, params: ToneMapParams = ToneMapParams()):
    """mu-law of a peak-normalised HDR image, clipped to [0, 1] for viewing."""
    t = mu_law(y, params, check=False)
    if isinstance(t, torch.Tensor):
        return t.clamp(0.0, 1.0)
    return np.clip(t, 0.0, 1.0)
