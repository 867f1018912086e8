"""Saturated throughput of one instance per batch cap, against b / L(b)."""
import argparse

from slopipe.scenarios import batch_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--caps", default="1,2,4,8,16,32")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    caps = tuple(int(c) for c in args.caps.split(","))
    print(f"{'cap':>4} {'measured':>10} {'analytic':>10} {'gap':>7}")
    for p in batch_sweep(caps=caps, seed=args.seed):
        print(f"{p.max_batch:>4} {p.measured_qps:>10.2f} {p.analytic_qps:>10.2f} "
              f"{p.measured_qps / p.analytic_qps - 1:>7.2%}")


if __name__ == "__main__":
    main()
