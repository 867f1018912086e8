"""Three-way incast onto a replicated stage; count routing and join violations."""
import argparse

from slopipe.scenarios import incast_run, incast_violations


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--queries", type=int, default=10_000)
    ap.add_argument("--rate", type=float, default=90.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rt = incast_run(n_queries=args.queries, rate_qps=args.rate, seed=args.seed)
    for k, v in incast_violations(rt).items():
        print(f"{k:14} {v}")


if __name__ == "__main__":
    main()
