"""Latency percentiles of the planned retrieval placement across offered rates."""
import argparse

from slopipe.planner import plan
from slopipe.scenarios import load_sweep, retrieval_problem
from slopipe.synthetic import retrieval_pipeline_doc


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rates", default="20,40,60,80,100")
    ap.add_argument("--count", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    problem = retrieval_problem()
    report = load_sweep(plan(problem), problem.profiles, retrieval_pipeline_doc(),
                        [float(r) for r in args.rates.split(",")], args.count, seed=args.seed)
    print(f"{'offered':>8} {'achieved':>9} {'p5 ms':>8} {'p50 ms':>8} {'p95 ms':>8} {'miss200':>8} {'miss500':>8}")
    for r in report.curve:
        print(f"{r.offered_qps:>8.1f} {r.achieved_qps:>9.2f} {r.p5_us / 1000:>8.1f} {r.p50_us / 1000:>8.1f} "
              f"{r.p95_us / 1000:>8.1f} {float(r.miss[200]):>8.3f} {float(r.miss[500]):>8.3f}")


if __name__ == "__main__":
    main()
