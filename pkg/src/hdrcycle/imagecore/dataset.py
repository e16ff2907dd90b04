"""Unpaired (training) and paired (evaluation) image collections."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np
import torch

from ..errors import DatasetError
from ..tonemap import peak_normalize
from .io import HDR_EXTENSIONS, LDR_EXTENSIONS, load_image
from .preprocess import resize
from .types import HdrImage, LdrImage

ItemRef = Union[Path, LdrImage, HdrImage]


@dataclass
class Batch:
    x: torch.Tensor  # B x 3 x H x W LDR in [0, 1]
    y: torch.Tensor  # B x 3 x H x W HDR, each sample peak-normalised to 1
    x_ids: list[str]
    y_ids: list[str]
    y_scale: torch.Tensor  # per-sample normalisation constants


def _to_tensor(px: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(px.transpose(2, 0, 1)).copy())


def _ref_id(prefix: str, ref: ItemRef, index: int) -> str:
    if isinstance(ref, Path):
        return f"{prefix}/{ref.stem}"
    return f"{prefix}/{index:05d}"


@dataclass
class UnpairedDataset:
    """Two independent image lists; no pairing between them is stored or used.

    Each epoch shuffles both lists independently with a generator seeded by
    ``(seed, epoch)``.  An epoch has ``max(N, M) // batch_size`` batches (the
    trailing partial batch is dropped); the shorter domain is cycled through
    successive permutations.
    """

    ldr_items: Sequence[ItemRef]
    hdr_items: Sequence[ItemRef]
    seed: int = 0
    batch_size: int = 4
    image_size: tuple[int, int] = (64, 64)
    ldr_ids: list[str] = field(init=False)
    hdr_ids: list[str] = field(init=False)

    def __post_init__(self):
        self.ldr_items = list(self.ldr_items)
        self.hdr_items = list(self.hdr_items)
        if not self.ldr_items or not self.hdr_items:
            raise DatasetError("both LDR and HDR collections must be non-empty")
        if self.batch_size < 1:
            raise DatasetError("batch_size must be >= 1")
        self.ldr_ids = [_ref_id("ldr", r, i) for i, r in enumerate(self.ldr_items)]
        self.hdr_ids = [_ref_id("hdr", r, i) for i, r in enumerate(self.hdr_items)]

    @property
    def lengths(self) -> tuple[int, int]:
        return len(self.ldr_items), len(self.hdr_items)

    def batches_per_epoch(self) -> int:
        return max(self.lengths) // self.batch_size

    def ldr_pixels(self, index: int) -> np.ndarray:
        ref = self.ldr_items[index]
        img = load_image(ref, "ldr") if isinstance(ref, Path) else ref
        if img.shape[:2] != tuple(self.image_size):
            img = resize(img, self.image_size)
        return img.pixels

    def hdr_pixels(self, index: int) -> np.ndarray:
        ref = self.hdr_items[index]
        img = load_image(ref, "hdr") if isinstance(ref, Path) else ref
        if img.shape[:2] != tuple(self.image_size):
            img = resize(img, self.image_size)
        return img.pixels

    def order(self, epoch: int) -> tuple[np.ndarray, np.ndarray]:
        """Index sequences (LDR, HDR) used in ``epoch``."""
        rng = np.random.default_rng([self.seed, epoch])
        n, m = self.lengths
        need = self.batches_per_epoch() * self.batch_size

        def sequence(count):
            parts = []
            total = 0
            while total < need:
                parts.append(rng.permutation(count))
                total += count
            return np.concatenate(parts)[:need]

        return sequence(n), sequence(m)

    def batches(self, epoch: int) -> Iterator[Batch]:
        xs, ys = self.order(epoch)
        b = self.batch_size
        for k in range(0, len(xs), b):
            xi, yi = xs[k:k + b], ys[k:k + b]
            yield self.make_batch(xi, yi)

    def make_batch(self, xi, yi) -> Batch:
        x = torch.stack([_to_tensor(self.ldr_pixels(i)) for i in xi])
        y_raw = torch.stack([_to_tensor(self.hdr_pixels(j)) for j in yi])
        y, scale = peak_normalize(y_raw)
        return Batch(x, y, [self.ldr_ids[i] for i in xi], [self.hdr_ids[j] for j in yi], scale)


def _list_files(directory: Path, extensions) -> list[Path]:
    if not directory.is_dir():
        raise DatasetError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in extensions)
    if not files:
        raise DatasetError(f"no images with extensions {extensions} in {directory}")
    return files


def make_dataset(ldr_dir, hdr_dir, seed: int = 0, batch_size: int = 4,
                 image_size: tuple[int, int] = (64, 64)) -> UnpairedDataset:
    return UnpairedDataset(
        _list_files(Path(ldr_dir), LDR_EXTENSIONS),
        _list_files(Path(hdr_dir), HDR_EXTENSIONS),
        seed=seed,
        batch_size=batch_size,
        image_size=tuple(image_size),
    )


def dataset_from_root(root, **kwargs) -> UnpairedDataset:
    """``<root>/ldr/*.png|jpg`` and ``<root>/hdr/*.hdr|pfm``."""
    root = Path(root)
    return make_dataset(root / "ldr", root / "hdr", **kwargs)


@dataclass
class PairedDataset:
    """LDR/HDR pairs matched by file stem; used only for evaluation."""

    pairs: list[tuple[ItemRef, ItemRef]]
    image_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if not self.pairs:
            raise DatasetError("evaluation set is empty")

    def __len__(self):
        return len(self.pairs)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for k, (lref, href) in enumerate(self.pairs):
            ldr = load_image(lref, "ldr") if isinstance(lref, Path) else lref
            hdr = load_image(href, "hdr") if isinstance(href, Path) else href
            if ldr.shape[:2] != tuple(self.image_size):
                ldr = resize(ldr, self.image_size)
            if hdr.shape[:2] != tuple(self.image_size):
                hdr = resize(hdr, self.image_size)
            name = lref.stem if isinstance(lref, Path) else f"{k:05d}"
            yield name, ldr.pixels, hdr.pixels

    @classmethod
    def from_root(cls, root, image_size=(64, 64)) -> "PairedDataset":
        root = Path(root)
        ldr = {p.stem: p for p in _list_files(root / "ldr", LDR_EXTENSIONS)}
        hdr = {p.stem: p for p in _list_files(root / "hdr", HDR_EXTENSIONS)}
        common = sorted(set(ldr) & set(hdr))
        if not common:
            raise DatasetError(f"no LDR/HDR pairs with matching names under {root}")
        return cls([(ldr[s], hdr[s]) for s in common], tuple(image_size))
