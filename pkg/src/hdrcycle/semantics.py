"""Semantic side-channels: image embeddings, segmentation, class matching, mIoU."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .errors import ShapeError

EMBED_DIM = 512
FUSED_DIM = 256
LUMA = (0.2126, 0.7152, 0.0722)


# ---------------------------------------------------------------------------
# embeddings

class ImageEncoder(Protocol):
    def __call__(self, img: torch.Tensor) -> torch.Tensor:
        """B x 3 x H x W display-range images -> B x 512 unit vectors."""


class StandInEncoder(nn.Module):
    """Frozen seeded random projection of a 16x16 thumbnail.

    The thumbnail is mean-centred per image and augmented with its mean and a
    constant so that flat (even black) images still get a well-defined
    direction.  Differentiable w.r.t. the input image.
    """

    def __init__(self, dim: int = EMBED_DIM, thumb: int = 16, seed: int = 0):
        super().__init__()
        self.thumb = thumb
        n_in = 3 * thumb * thumb + 2
        g = torch.Generator().manual_seed(seed)
        proj = torch.randn(n_in, dim, generator=g) / n_in ** 0.5
        self.register_buffer("proj", proj, persistent=False)
        self.requires_grad_(False)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        t = F.adaptive_avg_pool2d(img, self.thumb).flatten(1)
        mean = t.mean(dim=1, keepdim=True)
        feats = torch.cat([t - mean, mean, torch.ones_like(mean)], dim=1)
        e = feats @ self.proj.to(feats.dtype)
        return F.normalize(e, dim=1, eps=1e-12)


class ClipEncoder(nn.Module):
    """Pretrained CLIP image tower (needs locally available weights)."""

    def __init__(self, name: str = "openai/clip-vit-base-patch32"):
        super().__init__()
        from transformers import CLIPVisionModelWithProjection

        self.model = CLIPVisionModelWithProjection.from_pretrained(name).eval()
        self.model.requires_grad_(False)
        self.register_buffer("mean", torch.tensor([0.4815, 0.4578, 0.4082]).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor([0.2686, 0.2613, 0.2758]).view(1, 3, 1, 1), persistent=False)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(img, size=(224, 224), mode="bilinear", align_corners=False)
        x = (x - self.mean) / self.std
        e = self.model(pixel_values=x).image_embeds
        return F.normalize(e, dim=1)


def build_encoder(name: str = "standin", seed: int = 0) -> nn.Module:
    if name == "standin":
        return StandInEncoder(seed=seed)
    if name == "clip":
        return ClipEncoder()
    raise ValueError(f"unknown encoder {name!r}")


def encode(encoder, img) -> torch.Tensor:
    """Embed one H x W x 3 array or a B x 3 x H x W tensor."""
    single = not isinstance(img, torch.Tensor)
    if single:
        img = torch.from_numpy(np.ascontiguousarray(np.asarray(img, dtype=np.float32).transpose(2, 0, 1)))[None]
    with torch.no_grad():
        e = encoder(img)
    return e[0] if single else e


def project_and_fuse(proj: nn.Module, e1: torch.Tensor, e2: torch.Tensor) -> torch.Tensor:
    """P(e1) + P(e2) with one shared bias-free linear map."""
    return proj(e1) + proj(e2)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(a @ b / (na * nb))


# ---------------------------------------------------------------------------
# segmentation

@dataclass(frozen=True)
class SegMask:
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ShapeError("segmentation labels must be H x W")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError("labels must lie in [0, class_count)")
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def shape(self):
        return self.labels.shape


class Segmenter(Protocol):
    def __call__(self, img: np.ndarray) -> SegMask:
        """H x W x 3 image in [0, 1] -> label map."""


class StubSegmenter:
    """Luminance-quantile bucketing followed by connected components.

    Pixels are bucketed by how many of the distinct luminance quantiles
    (at 1/K, 2/K, ...) lie strictly below them.  Each 4-connected component of
    a bucket is a class; when there are more than ``max_classes`` components
    the largest ``max_classes - 1`` keep their own label and the rest share the
    last one.  Labels are ordered by component size, then by first pixel.
    """

    def __init__(self, buckets: int = 4, max_classes: int = 16):
        self.buckets = buckets
        self.max_classes = max_classes

    def __call__(self, img: np.ndarray) -> SegMask:
        img = np.asarray(img, dtype=np.float64)
        lum = img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]
        qs = np.quantile(lum, [k / self.buckets for k in range(1, self.buckets)])
        edges = np.unique(qs)
        bucket = (lum[..., None] > edges).sum(axis=-1)

        comps = np.zeros(lum.shape, dtype=np.int64)
        n = 0
        for b in np.unique(bucket):
            lab, k = ndimage.label(bucket == b)
            comps[lab > 0] = lab[lab > 0] + n
            n += k
        ids = comps.ravel() - 1
        sizes = np.bincount(ids, minlength=n)
        first = np.full(n, ids.size)
        np.minimum.at(first, ids, np.arange(ids.size))
        rank = np.lexsort((first, -sizes))
        new = np.empty(n, dtype=np.int64)
        new[rank] = np.arange(n)
        new = np.minimum(new, self.max_classes - 1)
        labels = new[ids].reshape(lum.shape)
        return SegMask(labels, int(labels.max()) + 1)


def build_segmenter(name: str = "stub") -> Segmenter:
    if name == "stub":
        return StubSegmenter()
    raise ValueError(f"unknown segmenter {name!r}")


def segment(segmenter, img: np.ndarray) -> SegMask:
    return segmenter(img)


# ---------------------------------------------------------------------------
# class correspondence and mIoU

def iou_matrix(a: SegMask, b: SegMask) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """IoU between every present label of ``a`` (rows) and of ``b`` (cols)."""
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    la, ia = np.unique(a.labels, return_inverse=True)
    lb, ib = np.unique(b.labels, return_inverse=True)
    inter = np.zeros((la.size, lb.size))
    np.add.at(inter, (ia.ravel(), ib.ravel()), 1)
    area_a = inter.sum(axis=1, keepdims=True)
    area_b = inter.sum(axis=0, keepdims=True)
    union = area_a + area_b - inter
    return inter / union, la, lb


def match_classes(a: SegMask, b: SegMask, method: str = "optimal") -> dict[int, tuple[int | None, float]]:
    """Map each label of ``a`` to a label of ``b`` (or None) and the pair IoU.

    ``optimal`` maximises the summed IoU over one-to-one pairings;
    ``greedy`` repeatedly takes the highest-IoU unmatched pair.  Pairs with
    zero overlap are left unmatched in both modes.
    """
    m, la, lb = iou_matrix(a, b)
    pairs: dict[int, tuple[int | None, float]] = {int(l): (None, 0.0) for l in la}
    if method == "optimal":
        rows, cols = linear_sum_assignment(m, maximize=True)
        for r, c in zip(rows, cols):
            if m[r, c] > 0:
                pairs[int(la[r])] = (int(lb[c]), float(m[r, c]))
    elif method == "greedy":
        work = m.copy()
        while work.size and work.max() > 0:
            r, c = np.unravel_index(np.argmax(work), work.shape)
            pairs[int(la[r])] = (int(lb[c]), float(m[r, c]))
            work[r, :] = -1.0
            work[:, c] = -1.0
    else:
        raise ValueError(f"unknown matching method {method!r}")
    return pairs


def miou(a: SegMask, b: SegMask, method: str = "optimal") -> float:
    """Mean IoU over matched classes; the class count is the larger label set."""
    pairs = match_classes(a, b, method)
    n_classes = max(np.unique(a.labels).size, np.unique(b.labels).size)
    return sum(iou for _, iou in pairs.values()) / n_classes

