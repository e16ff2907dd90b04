"""Command-line entry point: ``hdrcycle <command> [options]``.

Exit status: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SEED_ENV = "HDRCYCLE_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat key=value config file; flags override it")
    p.add_argument("--seed", type=int, help=f"random seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--size", type=int, help="square training / evaluation image size")
    p.add_argument("--device", default=None, help="torch device, e.g. cpu or cuda")
    p.add_argument("--provider", choices=("heuristic", "remote"), default=None)
    p.add_argument("--no-con", action="store_true", help="disable the contrastive loss")
    p.add_argument("--no-sem", action="store_true", help="disable the segmentation loss")
    p.add_argument("--no-llm", action="store_true", help="disable the perception module (loss, gating, refresh)")
    p.add_argument("--no-id", action="store_true", help="disable the identity loss")
    p.add_argument("--no-fusion", action="store_true", help="disable embedding fusion")
    p.add_argument("--no-gating", action="store_true", help="disable saliency gating")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="hdrcycle", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train both generators on an unpaired set")
    p.add_argument("--data", required=True, help="root with ldr/ and hdr/ subfolders")
    p.add_argument("--out", default=None, help="run directory (checkpoints, metrics.jsonl)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--constant-epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--steps", type=int, help="stop after this many optimisation steps")
    p.add_argument("--desk", action="store_true", help="CPU-sized profile (64x64, narrow generator, short hot schedule)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--eval-data", help="paired root evaluated after training")

    for name, help_text in (("ldr2hdr", "reconstruct HDR from an LDR image"),
                            ("hdr2ldr", "tone map an HDR image with the learned generator")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--in", dest="inp", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--no-perception", action="store_true", help="skip the perception-gated second pass")

    p = sub.add_parser("tonemap", parents=[common], help="analytic tone mapping operators")
    p.add_argument("--op", choices=("mu", "reinhard", "inverse-mu"), required=True)
    p.add_argument("--mu", type=float, default=5000.0)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-normalize", action="store_true", help="do not peak-normalise HDR input")

    p = sub.add_parser("saliency", parents=[common], help="write artifact / exposure maps as PNGs")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--role", choices=("hdr_output", "ldr_output"), default=None)

    p = sub.add_parser("eval", parents=[common], help="PSNR / SSIM / mIoU on a paired set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="root with ldr/ and hdr/ files matched by name")
    return parser


def _train_config(args):
    from .config import DESK_PROFILE, TrainConfig, read_config_file

    values = {}
    if getattr(args, "desk", False):
        values.update(DESK_PROFILE)
    if args.config:
        values.update(read_config_file(args.config))
    seed = args.seed if args.seed is not None else os.environ.get(SEED_ENV)
    flags = {
        "seed": None if seed is None else int(seed),
        "image_size": args.size,
        "device": args.device,
        "provider": args.provider,
        "epochs": getattr(args, "epochs", None),
        "constant_epochs": getattr(args, "constant_epochs", None),
        "batch": getattr(args, "batch", None),
        "max_steps": getattr(args, "steps", None),
        "out_dir": getattr(args, "out", None),
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    for flag, key in (("no_con", "use_con"), ("no_sem", "use_sem"), ("no_llm", "use_llm"),
                      ("no_id", "use_id"), ("no_fusion", "use_fusion"), ("no_gating", "use_gating")):
        if getattr(args, flag):
            values[key] = False
    if flags["epochs"] is not None and flags["constant_epochs"] is None:
        values["constant_epochs"] = min(values.get("constant_epochs", TrainConfig.constant_epochs), values["epochs"])
    return TrainConfig(**values)


def _cmd_train(args) -> int:
    from .imagecore.dataset import PairedDataset, dataset_from_root
    from .trainer import Trainer, evaluate

    cfg = _train_config(args)
    size = (cfg.image_size, cfg.image_size)
    ds = dataset_from_root(args.data, seed=cfg.seed, batch_size=cfg.batch, image_size=size)
    if args.resume:
        overrides = {k: getattr(cfg, k) for k in ("epochs", "max_steps", "out_dir", "device")}
        trainer = Trainer.from_checkpoint(args.resume, ds, **overrides)
    else:
        trainer = Trainer(cfg, ds)
    trainer.train()
    ckpts = sorted((Path(cfg.out_dir) / "checkpoints").glob("epoch_*.pt"))
    summary = {"epochs_done": trainer.epoch, "steps": trainer.global_step,
               "checkpoint": str(ckpts[-1]) if ckpts else None}
    if args.eval_data:
        summary["eval"] = evaluate(trainer.models, PairedDataset.from_root(args.eval_data, size))
    print(json.dumps(summary))
    return EXIT_OK


def _load_models(args):
    from .trainer import load_models

    models = load_models(args.ckpt, device=args.device or "cpu")
    if args.provider:
        from .perception import build_provider

        models.provider = build_provider(args.provider, models.cfg.heuristic)
    return models


def _cmd_ldr2hdr(args) -> int:
    from .imagecore import HdrImage, load_image, save_image
    from .trainer import translate_ldr

    models = _load_models(args)
    hdr = translate_ldr(models, load_image(args.inp, "ldr").pixels, use_perception=not args.no_perception)
    save_image(HdrImage(hdr), args.out, "hdr")
    return EXIT_OK


def _cmd_hdr2ldr(args) -> int:
    from .imagecore import LdrImage, load_image, save_image
    from .trainer import translate_hdr

    models = _load_models(args)
    ldr = translate_hdr(models, load_image(args.inp, "hdr").pixels, use_perception=not args.no_perception)
    save_image(LdrImage(ldr), args.out, "ldr")
    return EXIT_OK


def _cmd_tonemap(args) -> int:
    from .imagecore import HdrImage, LdrImage, load_image, save_image
    from .tonemap import ToneMapParams, inverse_mu_law, mu_law, peak_normalize, reinhard

    params = ToneMapParams(args.mu)
    if args.op == "inverse-mu":
        ldr = load_image(args.inp, "ldr").pixels
        save_image(HdrImage(inverse_mu_law(ldr.astype(np.float64), params)), args.out, "hdr")
        return EXIT_OK
    hdr = load_image(args.inp, "hdr").pixels.astype(np.float64)
    if args.op == "mu":
        if not args.no_normalize:
            hdr = peak_normalize(hdr)[0]
        out = np.clip(mu_law(hdr, params), 0.0, 1.0)
    else:
        out = reinhard(hdr)
    save_image(LdrImage(out), args.out, "ldr")
    return EXIT_OK


def _cmd_saliency(args) -> int:
    import cv2

    from .imagecore import load_image
    from .imagecore.io import kind_for_path
    from .perception import build_provider
    from .tonemap import display, peak_normalize

    kind = kind_for_path(args.inp)
    img = load_image(args.inp, kind).pixels.astype(np.float64)
    if kind == "hdr":
        img = display(peak_normalize(img)[0])
    role = args.role or ("hdr_output" if kind == "hdr" else "ldr_output")
    cfg = _train_config(args)
    report = build_provider(cfg.provider, cfg.heuristic).query(img, role)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, m in zip(("artifact", "over", "under"), report.saliency):
        if not cv2.imwrite(str(out / f"{name}.png"), (np.asarray(m) * 255).astype(np.uint8)):
            raise OSError(f"could not write {out / name}.png")
    n_af, n_ox, n_ux, n = report.counts
    print(json.dumps({"has_artifacts": report.has_artifacts, "provider": report.provider_id, "role": role,
                      "n_af": n_af, "n_ox": n_ox, "n_ux": n_ux, "n_total": n}))
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .imagecore.dataset import PairedDataset
    from .trainer import evaluate

    models = _load_models(args)
    size = args.size or models.cfg.image_size
    print(json.dumps(evaluate(models, PairedDataset.from_root(args.data, (size, size)))))
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "ldr2hdr": _cmd_ldr2hdr,
    "hdr2ldr": _cmd_hdr2ldr,
    "tonemap": _cmd_tonemap,
    "saliency": _cmd_saliency,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001
        print(f"hdrcycle {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME


run = main

if __name__ == "__main__":
    sys.exit(main())
