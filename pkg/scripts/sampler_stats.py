"""Monte-Carlo masked-ratio and block-length statistics of the span sampler.

    python3 scripts/sampler_stats.py --n 10000 --length 512
"""

import argparse

from pmlm.verification import check_sampler_stats, expected_block_freq


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10_000)
    ap.add_argument("--length", type=int, default=512)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--block-prob", type=float, default=0.4)
    args = ap.parse_args()

    report = check_sampler_stats(args.n, args.length, args.seed, block_prob=args.block_prob)
    print(f"masked ratio  min {report.min_ratio:.4f}  mean {report.mean_ratio:.4f}  max {report.max_ratio:.4f}")
    print("block  observed  target")
    for k, target in expected_block_freq().items():
        print(f"{k:5d}  {report.block_freq.get(k, 0.0):8.4f}  {target:6.2f}")
    print("\n".join(report.lines()))


if __name__ == "__main__":
    main()
