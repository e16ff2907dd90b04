"""Write a synthetic unpaired training tree and a paired evaluation tree."""
import argparse

from hdrcycle.toydata import write_tree


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("root")
    ap.add_argument("--n", type=int, default=8, help="images per domain")
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    train = write_tree(f"{args.root}/train", args.n, args.n, args.size, seed=args.seed)
    paired = write_tree(f"{args.root}/paired", max(2, args.n // 2), max(2, args.n // 2), args.size,
                        seed=args.seed + 1, paired=True)
    print(train)
    print(paired)


if __name__ == "__main__":
    main()
