"""Toy convergence run: desk profile on 8 + 8 synthetic images.

Extra ``key=value`` arguments override config fields, e.g.
``python scripts/toy_train.py --steps 200 use_con=false lr_g=2e-3``.
"""
import argparse
import time

import torch

from hdrcycle.config import TrainConfig, parse_value
from hdrcycle.toydata import make_unpaired
from hdrcycle.trainer import Trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--every", type=int, default=20, help="print every N steps")
    ap.add_argument("overrides", nargs="*")
    args = ap.parse_args()
    torch.set_num_threads(1)

    over = {}
    for item in args.overrides:
        key, _, text = item.partition("=")
        over[key] = parse_value(key, text)
    cfg = TrainConfig.desk(max_steps=args.steps, seed=args.seed, out_dir=args.out, **over)
    data = make_unpaired(8, 8, cfg.image_size, seed=args.seed, batch_size=cfg.batch)

    t0 = time.perf_counter()
    steps = [r for r in Trainer(cfg, data).train() if r["kind"] == "step"]
    elapsed = time.perf_counter() - t0
    keys = [k for k in ("total", "cyc", "id", "con", "sem", "llm", "gan_gy", "gan_gx", "d_y", "d_x") if k in steps[0]]
    print("step " + " ".join(f"{k:>8}" for k in keys))
    for r in steps[::args.every] + ([steps[-1]] if (len(steps) - 1) % args.every else []):
        print(f"{r['step']:4d} " + " ".join(f"{r[k]:8.4f}" for k in keys))
    ratio = steps[-1]["cyc"] / steps[0]["cyc"]
    print(f"cycle loss {steps[0]['cyc']:.4f} -> {steps[-1]['cyc']:.4f} ({100 * ratio:.1f}%), {elapsed:.0f}s")


if __name__ == "__main__":
    main()
