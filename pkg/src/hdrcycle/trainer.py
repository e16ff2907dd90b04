"""Alternating discriminator / generator optimisation of the LDR<->HDR cycle."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch

from .config import TrainConfig, write_config_file
from .discriminator import PatchDiscriminator, build_discriminator
from .generator import FeedbackUNet, FusionInputs, SaliencyTriplet, build_generator
from .imagecore.dataset import Batch, PairedDataset, UnpairedDataset
from .imagecore.preprocess import equalize_array
from .losses import (adversarial_losses, contrastive_loss, cycle_loss, generator_adversarial_loss, identity_loss,
                     llm_loss, semantic_loss, total_loss)
from .metrics import PerceptualMetric, psnr, ssim
from .perception import PerceptionCache, build_provider, refresh_cache, soft_fractions
from .semantics import build_encoder, build_segmenter, miou
from .tonemap import ToneMapParams, mu_law, peak_normalize

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "hdrcycle-checkpoint-v1"
MODEL_PREFIXES = ("gY", "gX", "dX", "dY")


def lr_schedule(epoch: int, cfg: TrainConfig, which: str = "g") -> float:
    """Constant for ``constant_epochs`` epochs, then linear decay reaching 0 at ``epochs``."""
    if which not in ("g", "d"):
        raise ValueError("which must be 'g' or 'd'")
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    base = cfg.lr_g if which == "g" else cfg.lr_d
    if epoch < cfg.constant_epochs:
        return base
    return base * (cfg.epochs - epoch) / (cfg.epochs - cfg.constant_epochs)


def _to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().double().numpy().transpose(1, 2, 0)


def equalize_batch(x: torch.Tensor) -> torch.Tensor:
    """Histogram-equalise each LDR image of a batch (no gradient)."""
    out = [torch.from_numpy(equalize_array(_to_image(img)).transpose(2, 0, 1).copy()) for img in x]
    return torch.stack(out).to(dtype=x.dtype, device=x.device)


@dataclass
class CycleModels:
    gY: FeedbackUNet  # LDR -> HDR
    gX: FeedbackUNet  # HDR -> LDR
    dX: PatchDiscriminator
    dY: PatchDiscriminator
    encoder: torch.nn.Module
    segmenter: object
    provider: object
    cfg: TrainConfig

    @classmethod
    def build(cls, cfg: TrainConfig) -> "CycleModels":
        dev = torch.device(cfg.device)
        return cls(
            build_generator(cfg.generator_config("ldr_to_hdr"), seed=cfg.seed + 1).to(dev),
            build_generator(cfg.generator_config("hdr_to_ldr"), seed=cfg.seed + 2).to(dev),
            build_discriminator(cfg.discriminator_config(), seed=cfg.seed + 3).to(dev),
            build_discriminator(cfg.discriminator_config(), seed=cfg.seed + 4).to(dev),
            build_encoder(cfg.encoder, seed=cfg.seed).to(dev),
            build_segmenter(cfg.segmenter),
            build_provider(cfg.provider, cfg.heuristic),
            cfg,
        )

    def named_modules(self):
        return {"gY": self.gY, "gX": self.gX, "dX": self.dX, "dY": self.dY}

    def state(self) -> dict:
        """Flat parameter archive keyed ``gY/...``, ``gX/...``, ``dX/...``, ``dY/...``."""
        out = {}
        for prefix, module in self.named_modules().items():
            for k, v in module.state_dict().items():
                out[f"{prefix}/{k}"] = v.detach().cpu().clone()
        return out

    def load_state(self, state: Mapping[str, torch.Tensor]) -> None:
        for prefix, module in self.named_modules().items():
            sub = {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + "/")}
            module.load_state_dict(sub)

    def train(self, mode: bool = True):
        for m in self.named_modules().values():
            m.train(mode)

    # -- helpers shared by training and inference --------------------------

    @property
    def tm(self) -> ToneMapParams:
        return ToneMapParams(self.cfg.mu)

    def hdr_display(self, y: torch.Tensor) -> torch.Tensor:
        return mu_law(y, self.tm, check=False)

    def embed(self, img: torch.Tensor) -> Optional[torch.Tensor]:
        return self.encoder(img) if self.cfg.use_fusion else None

    def run_gY(self, x, saliency=None, x_display=None):
        e = self.embed(x_display if x_display is not None else x)
        return self.gY(x, FusionInputs(saliency, e), self.encoder)[0]

    def run_gX(self, y, saliency=None):
        e = self.embed(self.hdr_display(y))
        return self.gX(y, FusionInputs(saliency, e), self.encoder)[0]


class NonFiniteLossError(FloatingPointError):
    pass


class Trainer:
    def __init__(self, cfg: TrainConfig, dataset: Optional[UnpairedDataset] = None,
                 models: Optional[CycleModels] = None):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.models = models or CycleModels.build(cfg)
        self.dataset = dataset
        self.cache = PerceptionCache(gate_floor=cfg.gate_floor)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        m = self.models
        self.opt_g = torch.optim.Adam(list(m.gY.parameters()) + list(m.gX.parameters()), lr=cfg.lr_g, betas=betas)
        self.opt_dY = torch.optim.Adam(m.dY.parameters(), lr=cfg.lr_d, betas=betas)
        self.opt_dX = torch.optim.Adam(m.dX.parameters(), lr=cfg.lr_d, betas=betas)
        self.epoch = 0  # next epoch to run
        self.global_step = 0
        self.history: list[dict] = []
        self.device = torch.device(cfg.device)

    # -- one optimisation step ---------------------------------------------

    def _saliency(self, ids, h, w) -> Optional[SaliencyTriplet]:
        if not self.cfg.perception_gating:
            return None
        return self.cache.saliency_for(ids, h, w, device=self.device)

    def _semantic(self, a: torch.Tensor, b: torch.Tensor) -> float:
        seg = self.models.segmenter
        vals = [semantic_loss(seg(_to_image(p)), seg(_to_image(q))) for p, q in zip(a, b)]
        return float(np.mean(vals))

    def train_step(self, batch: Batch) -> dict:
        cfg, m, w, sw = self.cfg, self.models, self.cfg.weights, self.cfg.switches
        x = batch.x.to(self.device)
        y = batch.y.to(self.device)
        if x.shape[0] != y.shape[0]:
            raise ValueError("LDR and HDR batches must have equal size")
        b, _, h, wd = x.shape
        m.train(True)

        x_eq = equalize_batch(x)
        y_disp = m.hdr_display(y)
        sal_x = self._saliency(batch.x_ids, h, wd)
        sal_y = self._saliency(batch.y_ids, h, wd)

        # forward cycle x -> y_hat -> x_rt, backward cycle y -> x_hat -> y_rt
        y_hat = m.run_gY(x, sal_x, x_display=x_eq)
        y_hat_disp = m.hdr_display(y_hat)
        x_rt = m.run_gX(y_hat)
        x_hat = m.run_gX(y, sal_y)
        y_rt = m.run_gY(x_hat)

        out: dict = {}
        if sw.adversarial:
            m.dY.requires_grad_(True)
            m.dX.requires_grad_(True)
            d_y, _ = adversarial_losses(m.dY(y_disp), m.dY(y_hat_disp.detach()))
            self.opt_dY.zero_grad(set_to_none=True)
            d_y.backward()
            self.opt_dY.step()
            d_x, _ = adversarial_losses(m.dX(x), m.dX(x_hat.detach()))
            self.opt_dX.zero_grad(set_to_none=True)
            d_x.backward()
            self.opt_dX.step()
            out["d_y"] = d_y.item()
            out["d_x"] = d_x.item()
        m.dY.requires_grad_(False)
        m.dX.requires_grad_(False)

        parts: dict = {}
        if sw.adversarial:
            parts["gan_gy"] = generator_adversarial_loss(m.dY(y_hat_disp), cfg.saturating_gan)
            parts["gan_gx"] = generator_adversarial_loss(m.dX(x_hat), cfg.saturating_gan)
        if sw.cycle:
            parts["cyc"] = cycle_loss(x, x_rt, y, y_rt, m.tm)
        if sw.identity:
            parts["id"] = identity_loss(m.run_gY(y, x_display=y_disp), y, m.run_gX(x), x, m.tm)
        if sw.contrastive:
            enc = m.encoder
            parts["con"] = (contrastive_loss(enc(x_eq), enc(y_hat_disp), w.tau)
                            + contrastive_loss(enc(y_disp), enc(x_hat), w.tau))
        if sw.semantic:
            parts["sem"] = (self._semantic(x_eq, y_hat_disp.clamp(0, 1))
                            + self._semantic(y_disp, equalize_batch(x_hat)))
        if sw.llm:
            params = cfg.heuristic
            fwd = soft_fractions(y_hat_disp.clamp(0, 1), params) * self.cache.loss_gates(batch.x_ids, device=self.device)
            bwd = soft_fractions(x_hat, params) * self.cache.loss_gates(batch.y_ids, device=self.device)
            bwd = bwd * bwd.new_tensor([1.0, 0.0, 0.0])  # artifact term only for LDR outputs
            parts["llm"] = llm_loss(fwd, w) + llm_loss(bwd, w)

        total = total_loss(parts, w, sw)
        if not torch.is_tensor(total) or not total.requires_grad:
            raise ValueError("no differentiable loss term is enabled")
        if not torch.isfinite(total):
            self._dump_nonfinite(batch, parts)
            raise NonFiniteLossError(f"non-finite generator loss at step {self.global_step}")
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        for name, p in list(m.gY.named_parameters()) + list(m.gX.named_parameters()):
            if p.grad is not None and not torch.isfinite(p.grad).all():
                self._dump_nonfinite(batch, parts)
                raise NonFiniteLossError(f"non-finite gradient in {name} at step {self.global_step}")
        self.opt_g.step()

        for k, v in parts.items():
            out[k] = v.item() if torch.is_tensor(v) else float(v)
        out["total"] = total.item()
        return out

    def _dump_nonfinite(self, batch: Batch, parts: Mapping) -> None:
        path = Path(self.cfg.out_dir) / f"nonfinite_step{self.global_step}.json"
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps({
                "step": self.global_step, "epoch": self.epoch,
                "x_ids": batch.x_ids, "y_ids": batch.y_ids,
                "parts": {k: (v.item() if torch.is_tensor(v) else float(v)) for k, v in parts.items()},
            }, indent=2))
            log.error("non-finite loss; diagnostics written to %s", path)
        except OSError:
            log.exception("could not write non-finite diagnostics")

    # -- per-epoch perception refresh --------------------------------------

    @torch.no_grad()
    def refresh_perception(self, epoch: int) -> None:
        m, ds = self.models, self.dataset
        m.train(False)
        outputs = {}
        bsz = self.cfg.batch
        for start in range(0, len(ds.ldr_items), bsz):
            idx = range(start, min(start + bsz, len(ds.ldr_items)))
            ids = [ds.ldr_ids[i] for i in idx]
            x = torch.stack([torch.from_numpy(ds.ldr_pixels(i).transpose(2, 0, 1).copy()) for i in idx]).to(self.device)
            sal = self._saliency(ids, *x.shape[-2:])
            y_hat = m.run_gY(x, sal, x_display=equalize_batch(x))
            for sid, img in zip(ids, m.hdr_display(y_hat).clamp(0, 1)):
                outputs[sid] = (_to_image(img), "hdr_output")
        for start in range(0, len(ds.hdr_items), bsz):
            idx = range(start, min(start + bsz, len(ds.hdr_items)))
            ids = [ds.hdr_ids[i] for i in idx]
            y = torch.stack([torch.from_numpy(ds.hdr_pixels(i).transpose(2, 0, 1).copy()) for i in idx])
            y = peak_normalize(y)[0].to(self.device)
            x_hat = m.run_gX(y, self._saliency(ids, *y.shape[-2:]))
            for sid, img in zip(ids, x_hat):
                outputs[sid] = (_to_image(img), "ldr_output")
        refresh_cache(self.cache, outputs, m.provider, epoch)
        m.train(True)

    # -- loop ---------------------------------------------------------------

    def _set_lr(self, epoch: int) -> tuple[float, float]:
        lr_g = lr_schedule(epoch, self.cfg, "g")
        lr_d = lr_schedule(epoch, self.cfg, "d")
        for opt, lr in ((self.opt_g, lr_g), (self.opt_dY, lr_d), (self.opt_dX, lr_d)):
            for group in opt.param_groups:
                group["lr"] = lr
        return lr_g, lr_d

    def train(self, log_path: Optional[Path] = None, checkpoint_dir: Optional[Path] = None) -> list[dict]:
        if self.dataset is None:
            raise ValueError("trainer has no dataset")
        cfg = self.cfg
        out_dir = Path(cfg.out_dir)
        log_path = Path(log_path) if log_path else out_dir / "metrics.jsonl"
        checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else out_dir / "checkpoints"
        log_path.parent.mkdir(parents=True, exist_ok=True)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_config_file(cfg, out_dir / "config.txt")
        # a fresh run starts a new log; a resumed one appends
        fresh = self.epoch == 0 and self.global_step == 0
        with open(log_path, "w" if fresh else "a") as logf:
            def emit(record):
                self.history.append(record)
                logf.write(json.dumps(record) + "\n")
                logf.flush()

            while self.epoch < cfg.epochs:
                epoch = self.epoch
                lr_g, lr_d = self._set_lr(epoch)
                emit({"kind": "epoch", "epoch": epoch, "lr_g": lr_g, "lr_d": lr_d})
                stop = False
                for batch in self.dataset.batches(epoch):
                    parts = self.train_step(batch)
                    emit({"kind": "step", "epoch": epoch, "step": self.global_step, **parts})
                    self.global_step += 1
                    if cfg.max_steps and self.global_step >= cfg.max_steps:
                        stop = True
                        break
                if cfg.use_llm:
                    self.refresh_perception(epoch)
                self.epoch = epoch + 1
                last = stop or self.epoch == cfg.epochs
                if (self.epoch % cfg.ckpt_every == 0) or last:
                    self.save_checkpoint(checkpoint_dir / f"epoch_{epoch:04d}.pt")
                if stop:
                    break
        return self.history

    # -- checkpoints --------------------------------------------------------

    def checkpoint(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "state": self.models.state(),
            "optim": {"g": self.opt_g.state_dict(), "dY": self.opt_dY.state_dict(), "dX": self.opt_dX.state_dict()},
            "cache": self.cache.to_state(),
            "rng": torch.get_rng_state(),
        }

    def save_checkpoint(self, path) -> Path:
        """Atomic write: a failed save leaves earlier checkpoints untouched."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        try:
            torch.save(self.checkpoint(), tmp)
            os.replace(tmp, path)
        finally:
            if tmp.exists():
                tmp.unlink()
        return path

    @classmethod
    def from_checkpoint(cls, path, dataset: Optional[UnpairedDataset] = None, **overrides) -> "Trainer":
        ckpt = load_checkpoint(path)
        cfg = TrainConfig(**{**ckpt["config"], **overrides})
        trainer = cls(cfg, dataset)
        trainer.models.load_state(ckpt["state"])
        trainer.opt_g.load_state_dict(ckpt["optim"]["g"])
        trainer.opt_dY.load_state_dict(ckpt["optim"]["dY"])
        trainer.opt_dX.load_state_dict(ckpt["optim"]["dX"])
        trainer.cache = PerceptionCache.from_state(ckpt["cache"])
        trainer.epoch = int(ckpt["epoch"])
        trainer.global_step = int(ckpt["global_step"])
        torch.set_rng_state(ckpt["rng"])
        return trainer


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    return ckpt


def load_models(path, device: str = "cpu") -> CycleModels:
    ckpt = load_checkpoint(path)
    cfg = TrainConfig(**{**ckpt["config"], "device": device})
    models = CycleModels.build(cfg)
    models.load_state(ckpt["state"])
    models.train(False)
    return models


# ---------------------------------------------------------------------------
# module-level API

def train_step(batch: Batch, trainer: Trainer) -> dict:
    return trainer.train_step(batch)


def train(cfg: TrainConfig, dataset: UnpairedDataset) -> list[dict]:
    return Trainer(cfg, dataset).train()


def _pad_to_multiple(t: torch.Tensor, multiple: int):
    h, w = t.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        t = torch.nn.functional.pad(t, (0, pw, 0, ph), mode="replicate")
    return t, (h, w)


@torch.no_grad()
def translate_ldr(models: CycleModels, x: np.ndarray, use_perception: bool = True) -> np.ndarray:
    """LDR H x W x 3 -> HDR (peak-relative radiance).

    With ``use_perception`` a neutral pass is followed by a second pass gated
    by the perception report of the first output.
    """
    models.train(False)
    t = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1), dtype=np.float32))[None].to(models.cfg.device)
    t, (h, w) = _pad_to_multiple(t, models.gY.cfg.size_multiple)
    t_eq = equalize_batch(t)
    y = models.run_gY(t, x_display=t_eq)
    if use_perception and models.cfg.perception_gating:
        rep = models.provider.query(_to_image(models.hdr_display(y)[0].clamp(0, 1)), "hdr_output")
        cache = PerceptionCache({"img": rep}, gate_floor=models.cfg.gate_floor)
        y = models.run_gY(t, cache.saliency_for(["img"], *t.shape[-2:], device=t.device), x_display=t_eq)
    return _to_image(y[0])[:h, :w].astype(np.float32)


@torch.no_grad()
def translate_hdr(models: CycleModels, y: np.ndarray, use_perception: bool = True) -> np.ndarray:
    """HDR H x W x 3 (any scale) -> LDR in [0, 1]."""
    models.train(False)
    t = torch.from_numpy(np.ascontiguousarray(y.transpose(2, 0, 1), dtype=np.float32))[None].to(models.cfg.device)
    t = peak_normalize(t)[0]
    t, (h, w) = _pad_to_multiple(t, models.gX.cfg.size_multiple)
    x = models.run_gX(t)
    if use_perception and models.cfg.perception_gating:
        rep = models.provider.query(_to_image(x[0]), "ldr_output")
        cache = PerceptionCache({"img": rep}, gate_floor=models.cfg.gate_floor)
        x = models.run_gX(t, cache.saliency_for(["img"], *t.shape[-2:], device=t.device))
    return np.clip(_to_image(x[0])[:h, :w], 0, 1).astype(np.float32)


def evaluate(models: CycleModels, dataset: PairedDataset,
             perceptual: Optional[Mapping[str, PerceptualMetric]] = None) -> dict:
    """PSNR / SSIM on mu-law tone-mapped HDR pairs, mIoU of their segmentations,
    plus PSNR / SSIM of the HDR -> LDR direction."""
    if len(dataset) == 0:
        raise ValueError("evaluation set is empty")
    tm = models.tm
    rows = []
    for name, ldr, hdr in dataset:
        y_hat = translate_ldr(models, ldr)
        ref = mu_law(peak_normalize(hdr)[0], tm)
        test = mu_law(peak_normalize(y_hat)[0], tm)
        x_hat = translate_hdr(models, hdr)
        row = {
            "psnr": psnr(ref, test),
            "ssim": ssim(ref, test),
            "miou": miou(models.segmenter(ref), models.segmenter(test)),
            "psnr_ldr": psnr(ldr, x_hat),
            "ssim_ldr": ssim(ldr, x_hat),
        }
        for key, metric in (perceptual or {}).items():
            row[key] = float(metric(ref, test))
        rows.append(row)
    keys = rows[0].keys()
    result = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    result["count"] = len(rows)
    return result
