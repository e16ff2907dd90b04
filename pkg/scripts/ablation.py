"""Toy ablation table: switch off one term at a time and compare.

Each row trains the desk profile for ``--steps`` steps on the synthetic set
and evaluates on a held-out paired set (PSNR/SSIM on mu-law tone-mapped HDR,
mIoU of stub segmentations).  Slow: roughly five minutes per row on one core.
"""
import argparse
import json

import torch

from hdrcycle.config import TrainConfig
from hdrcycle.toydata import make_paired, make_unpaired
from hdrcycle.trainer import Trainer, evaluate

ROWS = {
    "baseline": dict(use_con=False, use_sem=False, use_llm=False, use_fusion=False),
    "no_con": dict(use_con=False),
    "no_sem": dict(use_sem=False),
    "no_llm": dict(use_llm=False),
    "no_fusion": dict(use_fusion=False),
    "full": {},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rows", nargs="*", default=list(ROWS), choices=list(ROWS))
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    torch.set_num_threads(1)

    table = {}
    for name in args.rows:
        cfg = TrainConfig.desk(max_steps=args.steps, seed=args.seed, out_dir=f"{args.out}/{name}", **ROWS[name])
        trainer = Trainer(cfg, make_unpaired(8, 8, cfg.image_size, seed=args.seed, batch_size=cfg.batch))
        steps = [r for r in trainer.train() if r["kind"] == "step"]
        metrics = evaluate(trainer.models, make_paired(4, cfg.image_size, seed=100 + args.seed))
        table[name] = {"cyc_final": steps[-1]["cyc"], **{k: metrics[k] for k in ("psnr", "ssim", "miou")}}
        print(name, json.dumps(table[name]), flush=True)

    print(f"\n{'row':<10} {'cyc':>8} {'psnr':>8} {'ssim':>8} {'miou':>8}")
    for name, r in table.items():
        print(f"{name:<10} {r['cyc_final']:8.4f} {r['psnr']:8.2f} {r['ssim']:8.4f} {r['miou']:8.4f}")


if __name__ == "__main__":
    main()
