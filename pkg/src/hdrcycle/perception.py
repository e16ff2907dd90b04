"""Artifact / exposure perception: heuristic masks, providers and the per-epoch cache.

The heuristic provider is the pixel-level authority.  A remote provider (an
HTTP service fronting a multimodal model) only contributes a yes/no verdict
and, optionally, its own region maps; any failure falls back to the
heuristic result.
"""
from __future__ import annotations

import base64
import json
import logging
import math
import os
import threading
import urllib.request
from dataclasses import dataclass, field
from typing import Mapping, Optional, Protocol

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from .generator import SaliencyTriplet

log = logging.getLogger(__name__)

LUMA = (0.2126, 0.7152, 0.0722)
ROLES = ("hdr_output", "ldr_output")

PROMPT = (
    "Does this image contain synthesis artifacts? Answer 1) Yes or No only. "
    "2) If Yes, return saliency maps marking the artifact regions in red, "
    "the overexposed regions in blue and the underexposed regions in yellow."
)


@dataclass(frozen=True)
class HeuristicParams:
    t_over: float = 0.95
    t_under: float = 0.05
    blur_sigma: float = 1.5
    lap_threshold: float = 0.1
    temperature: float = 0.02

    def __post_init__(self):
        if not 0.0 < self.t_under < self.t_over < 1.0:
            raise ValueError(f"need 0 < t_under < t_over < 1, got {self.t_under}, {self.t_over}")
        if not self.blur_sigma > 0:
            raise ValueError("blur_sigma must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


# ---------------------------------------------------------------------------
# differentiable primitives on B x 3 x H x W tensors

def luminance(img: torch.Tensor) -> torch.Tensor:
    w = img.new_tensor(LUMA).view(1, 3, 1, 1)
    return (img * w).sum(dim=1, keepdim=True)


def _gaussian_kernel(sigma: float, dtype, device) -> torch.Tensor:
    radius = max(1, math.ceil(3 * sigma))
    x = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    g = torch.exp(-x**2 / (2 * sigma**2))
    return g / g.sum()


def _pad(x: torch.Tensor, r: int) -> torch.Tensor:
    # reflect without repeating the edge pixel, OpenCV's default border
    if min(x.shape[-2:]) > r:
        return F.pad(x, (r, r, r, r), mode="reflect")
    return F.pad(x, (r, r, r, r), mode="replicate")


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    g = _gaussian_kernel(sigma, x.dtype, x.device)
    r = g.numel() // 2
    x = F.conv2d(_pad(x, r), g.view(1, 1, 1, -1))
    return F.conv2d(x, g.view(1, 1, -1, 1))


_LAPLACIAN = ((0.0, 1.0, 0.0), (1.0, -4.0, 1.0), (0.0, 1.0, 0.0))


def laplacian(x: torch.Tensor) -> torch.Tensor:
    k = x.new_tensor(_LAPLACIAN).view(1, 1, 3, 3)
    return F.conv2d(_pad(x, 1), k)


def artifact_response(img: torch.Tensor, blur_sigma: float) -> torch.Tensor:
    """|Laplacian(blur(L) - L)| on luminance: large on isolated high-frequency spikes."""
    lum = luminance(img)
    return laplacian(gaussian_blur(lum, blur_sigma) - lum).abs()


def mask_logits(img: torch.Tensor, params: HeuristicParams = HeuristicParams()):
    """Signed margins (artifact, over, under); a pixel is flagged iff its margin >= 0."""
    lum = luminance(img)
    return (
        artifact_response(img, params.blur_sigma) - params.lap_threshold,
        lum - params.t_over,
        params.t_under - lum,
    )


def soft_masks(img: torch.Tensor, params: HeuristicParams = HeuristicParams()):
    return tuple(torch.sigmoid(z / params.temperature) for z in mask_logits(img, params))


def soft_fractions(img: torch.Tensor, params: HeuristicParams = HeuristicParams()) -> torch.Tensor:
    """B x 3 differentiable flagged-pixel fractions (artifact, over, under)."""
    return torch.stack([m.mean(dim=(1, 2, 3)) for m in soft_masks(img, params)], dim=1)


# ---------------------------------------------------------------------------
# numpy entry points (H x W x 3 in, H x W masks out)

def _as_batch(img: np.ndarray) -> torch.Tensor:
    img = np.asarray(img, dtype=np.float64)
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]


def heuristic_exposure_masks(img: np.ndarray, t_over: float = 0.95, t_under: float = 0.05,
                             soft: bool = False, temperature: float = 0.02):
    params = HeuristicParams(t_over=t_over, t_under=t_under, temperature=temperature)
    _, z_over, z_under = mask_logits(_as_batch(img), params)
    if soft:
        return (torch.sigmoid(z_over / temperature)[0, 0].numpy(),
                torch.sigmoid(z_under / temperature)[0, 0].numpy())
    return (z_over >= 0)[0, 0].numpy().astype(np.float32), (z_under >= 0)[0, 0].numpy().astype(np.float32)


def heuristic_artifact_mask(img: np.ndarray, blur_sigma: float = 1.5, lap_threshold: float = 0.1,
                            soft: bool = False, temperature: float = 0.02) -> np.ndarray:
    if not blur_sigma > 0:
        raise ValueError("blur_sigma must be positive")
    z = artifact_response(_as_batch(img), blur_sigma) - lap_threshold
    if soft:
        return torch.sigmoid(z / temperature)[0, 0].numpy()
    return (z >= 0)[0, 0].numpy().astype(np.float32)


# ---------------------------------------------------------------------------
# reports and providers

@dataclass
class PerceptionReport:
    has_artifacts: bool
    saliency: tuple[np.ndarray, np.ndarray, np.ndarray]  # artifact, over, under; H x W in {0, 1}
    counts: tuple[int, int, int, int]  # n_af, n_ox, n_ux, n_total
    provider_id: str

    @property
    def fractions(self) -> tuple[float, float, float]:
        n_af, n_ox, n_ux, n = self.counts
        return n_af / n, n_ox / n, n_ux / n

    def to_state(self) -> dict:
        return {
            "has_artifacts": self.has_artifacts,
            "saliency": [torch.from_numpy(np.asarray(m, dtype=np.float32)) for m in self.saliency],
            "counts": list(self.counts),
            "provider_id": self.provider_id,
        }

    @classmethod
    def from_state(cls, state: dict) -> "PerceptionReport":
        return cls(bool(state["has_artifacts"]), tuple(m.numpy() for m in state["saliency"]),
                   tuple(int(c) for c in state["counts"]), state["provider_id"])


def _report(artifact, over, under, role, provider_id, verdict: Optional[bool] = None) -> PerceptionReport:
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}")
    if role == "ldr_output":
        # a tone-mapped output is allowed to clip; only artifacts are penalised
        over = np.zeros_like(over)
        under = np.zeros_like(under)
    if verdict is False:
        artifact = np.zeros_like(artifact)
    n_af, n_ox, n_ux = (int(m.sum()) for m in (artifact, over, under))
    has = n_af > 0 if verdict is None else (verdict and n_af > 0)
    return PerceptionReport(bool(has), (artifact, over, under), (n_af, n_ox, n_ux, artifact.size), provider_id)


class PerceptionProvider(Protocol):
    provider_id: str

    def query(self, img: np.ndarray, role: str) -> PerceptionReport:
        """``img`` is H x W x 3 in display range [0, 1]."""


class HeuristicProvider:
    provider_id = "heuristic"

    def __init__(self, params: HeuristicParams = HeuristicParams()):
        self.params = params

    def masks(self, img: np.ndarray):
        z_af, z_ox, z_ux = mask_logits(_as_batch(img), self.params)
        return tuple((z >= 0)[0, 0].numpy().astype(np.float32) for z in (z_af, z_ox, z_ux))

    def query(self, img: np.ndarray, role: str) -> PerceptionReport:
        return _report(*self.masks(img), role, self.provider_id)


def _png_b64(img: np.ndarray) -> str:
    q = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    if q.ndim == 3:
        q = cv2.cvtColor(q, cv2.COLOR_RGB2BGR)
    ok, buf = cv2.imencode(".png", q)
    if not ok:
        raise ValueError("PNG encoding failed")
    return base64.b64encode(buf.tobytes()).decode("ascii")


def _decode_map(b64: str, shape) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(b64), dtype=np.uint8)
    m = cv2.imdecode(raw, cv2.IMREAD_GRAYSCALE)
    if m is None or m.shape != tuple(shape):
        raise ValueError("saliency map does not decode to the image size")
    return (m >= 128).astype(np.float32)


class RemoteProvider:
    """JSON-over-HTTP perception service.

    Request body: ``{"prompt": str, "role": str, "image_png_base64": str}``.
    Reply body: ``{"verdict": "yes"|"no", "saliency": {"artifact"|"over"|"under": <base64 PNG>}}``
    with ``saliency`` optional.  Returned maps restrict (logical AND) the
    heuristic masks; the verdict gates the artifact channel.
    """

    provider_id = "remote"

    def __init__(self, url: Optional[str] = None, token: Optional[str] = None, timeout: float = 30.0,
                 fallback: Optional[HeuristicProvider] = None):
        self.url = url or os.environ.get("HDRCYCLE_PERCEPTION_URL")
        self.token = token or os.environ.get("HDRCYCLE_PERCEPTION_TOKEN")
        self.timeout = timeout
        self.fallback = fallback or HeuristicProvider()

    def request_body(self, img: np.ndarray, role: str) -> dict:
        return {"prompt": PROMPT, "role": role, "image_png_base64": _png_b64(img)}

    def _post(self, body: dict) -> dict:
        if not self.url:
            raise ConnectionError("no perception endpoint configured")
        req = urllib.request.Request(self.url, data=json.dumps(body).encode(), method="POST",
                                     headers={"Content-Type": "application/json"})
        if self.token:
            req.add_header("Authorization", f"Bearer {self.token}")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode())

    def query(self, img: np.ndarray, role: str) -> PerceptionReport:
        heur = self.fallback.masks(img)
        try:
            reply = self._post(self.request_body(img, role))
            verdict = str(reply["verdict"]).strip().lower()
            if verdict not in ("yes", "no"):
                raise ValueError(f"unexpected verdict {reply['verdict']!r}")
            maps = list(heur)
            for k, name in enumerate(("artifact", "over", "under")):
                encoded = (reply.get("saliency") or {}).get(name)
                if encoded:
                    maps[k] = maps[k] * _decode_map(encoded, img.shape[:2])
        except Exception as exc:  # noqa: BLE001 - any failure degrades to the heuristic
            log.warning("remote perception failed (%s); using heuristic result", exc)
            return _report(*heur, role, self.fallback.provider_id)
        return _report(*maps, role, self.provider_id, verdict=verdict == "yes")


def build_provider(name: str = "heuristic", params: HeuristicParams = HeuristicParams()):
    if name == "heuristic":
        return HeuristicProvider(params)
    if name == "remote":
        return RemoteProvider(fallback=HeuristicProvider(params))
    raise ValueError(f"unknown perception provider {name!r}")


def query(provider, img: np.ndarray, role: str) -> PerceptionReport:
    return provider.query(img, role)


# ---------------------------------------------------------------------------
# cache

def gating_map(mask: np.ndarray, floor: float) -> np.ndarray:
    """Turn a binary mask into a gating map: 1 on flagged pixels, ``floor`` elsewhere.

    A mask with nothing flagged gives the neutral all-ones map.
    """
    mask = np.asarray(mask, dtype=np.float32)
    if not mask.any():
        return np.ones_like(mask)
    return floor + (1.0 - floor) * mask


@dataclass
class PerceptionCache:
    """Latest report per sample id, refreshed once per epoch."""

    reports: dict[str, PerceptionReport] = field(default_factory=dict)
    epoch: int = -1
    gate_floor: float = 0.5

    def __post_init__(self):
        self._lock = threading.RLock()

    def get(self, sample_id: str) -> Optional[PerceptionReport]:
        with self._lock:
            return self.reports.get(sample_id)

    def saliency_for(self, ids, h: int, w: int, dtype=torch.float32, device=None) -> SaliencyTriplet:
        """Gating maps for a batch; samples without a report get all-ones maps."""
        maps = []
        with self._lock:
            for sid in ids:
                rep = self.reports.get(sid)
                if rep is None or rep.saliency[0].shape != (h, w):
                    ones = np.ones((h, w), np.float32)
                    maps.append((ones, ones, ones))
                else:
                    maps.append(tuple(gating_map(m, self.gate_floor) for m in rep.saliency))
        return SaliencyTriplet.stack(maps, dtype=dtype, device=device)

    def loss_gates(self, ids, dtype=torch.float32, device=None) -> torch.Tensor:
        """B x 3 {0, 1} switches for the (artifact, over, under) loss terms."""
        rows = []
        with self._lock:
            for sid in ids:
                rep = self.reports.get(sid)
                if rep is None:
                    rows.append((0.0, 0.0, 0.0))
                else:
                    _, n_ox, n_ux, _ = rep.counts
                    rows.append((float(rep.has_artifacts), float(n_ox > 0), float(n_ux > 0)))
        return torch.tensor(rows, dtype=dtype, device=device).view(len(rows), 3)

    def to_state(self) -> dict:
        with self._lock:
            return {"epoch": self.epoch, "gate_floor": self.gate_floor,
                    "reports": {k: v.to_state() for k, v in self.reports.items()}}

    @classmethod
    def from_state(cls, state: dict) -> "PerceptionCache":
        return cls({k: PerceptionReport.from_state(v) for k, v in state["reports"].items()},
                   int(state["epoch"]), float(state["gate_floor"]))


def refresh_cache(cache: PerceptionCache, model_outputs: Mapping[str, tuple[np.ndarray, str]],
                  provider, epoch: int) -> PerceptionCache:
    """Replace each listed sample's report; ``model_outputs`` maps id -> (display image, role)."""
    fresh = {sid: provider.query(img, role) for sid, (img, role) in model_outputs.items()}
    with cache._lock:
        cache.reports.update(fresh)
        cache.epoch = epoch
    return cache
