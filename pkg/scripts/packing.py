"""Planned co-location vs one full pipeline per node: throughput and per-node GRACT."""
import argparse

from slopipe.scenarios import packing_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--nodes", type=int, default=4)
    ap.add_argument("--load", type=float, default=0.9, help="fraction of planned capacity to offer")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    r = packing_run(n_nodes=args.nodes, load_fraction=args.load, seed=args.seed)
    for name, pl, gr in (("planned", r.planned, r.planned_gract), ("monolithic", r.baseline, r.baseline_gract)):
        print(f"{name}: min throughput {min(pl.throughput.values()):.2f} qps")
        for m, q in sorted(pl.throughput.items()):
            print(f"    {m:12} {q:8.2f} qps")
        for n, g in gr.items():
            print(f"    node {n}: layout {pl.layouts[n]}  GRACT {g:.3f}")
    print(f"throughput ratio {r.throughput_ratio:.3f}")
    print(f"dedicated vision nodes {r.dedicated_b_nodes}, mean GRACT {r.dedicated_b_mean:.3f}")


if __name__ == "__main__":
    main()
