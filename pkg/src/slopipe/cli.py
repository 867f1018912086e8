"""Command line entry point.

Exit codes: 0 ok, 1 configuration error, 2 infeasible placement,
3 an SLO's allowed miss rate was exceeded.
"""
from __future__ import annotations

import argparse
import asyncio
import csv
import json
import logging
import os
import sys

from . import bench
from .config import DeploymentConfig
from .deploy import deploy, placement_for, problem_for, run_bench, write_outputs
from .errors import ConfigError, Infeasible, IoError
from .planner import validate

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_SLO = 0, 1, 2, 3

log = logging.getLogger("slopipe")


def _load(path: str, seed: int | None = None) -> DeploymentConfig:
    cfg = DeploymentConfig.load(path)
    if seed is not None:
        cfg.seed = seed
        if cfg.workload is not None:
            cfg.workload.seed = seed
    cfg.validate()
    return cfg


def cmd_plan(args) -> int:
    cfg = _load(args.config)
    if args.nodes:
        cfg.cluster.nodes = args.nodes
    profiles = cfg.load_profiles()
    spec = cfg.load_pipeline()
    problem = problem_for(cfg, profiles, spec)
    try:
        placement = placement_for(cfg, problem, args.baseline)
    except Infeasible as e:
        print(f"infeasible: {e}", file=sys.stderr)
        for v in e.violations:
            print(f"  {v.constraint} node={v.node} model={v.model} {v.detail}", file=sys.stderr)
        return EXIT_INFEASIBLE
    bad = validate(placement, problem)
    if bad:
        print("placement violates constraints:", file=sys.stderr)
        for v in bad:
            print(f"  {v.constraint} node={v.node} model={v.model} {v.detail}", file=sys.stderr)
        return EXIT_INFEASIBLE
    print(placement.table())
    if args.out:
        with open(args.out, "w") as f:
            json.dump(placement.to_json(), f, indent=2)
            f.write("\n")
    return EXIT_OK


def _print_report(report: bench.RunReport) -> None:
    for row in report.curve:
        miss = " ".join(f"miss@{bench.fmt_ms(ms)}ms={float(r):.4f}" for ms, r in row.miss.items())
        print(f"offered={row.offered_qps:g}qps p5={bench.fmt_us_as_ms(row.p5_us)}ms "
              f"p50={bench.fmt_us_as_ms(row.p50_us)}ms p95={bench.fmt_us_as_ms(row.p95_us)}ms "
              f"{miss} achieved={row.achieved_qps:.2f}qps")


def cmd_bench(args) -> int:
    cfg = _load(args.config, args.seed)
    if cfg.workload is None:
        raise ConfigError("bench needs a workload section")
    rates = [float(r) for r in args.rates.split(",")] if args.rates else None
    try:
        result = run_bench(cfg, preloading=args.preload, rates=rates, baseline=args.baseline)
    except Infeasible as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    paths = write_outputs(result, args.out, svg=args.svg)
    _print_report(result.report)
    for p in paths:
        log.info("wrote %s", p)
    missed = result.report.slo_violations()
    for s in missed:
        rate = result.report.miss_rates()[s.latency_ms]
        print(f"SLO {bench.fmt_ms(s.latency_ms)}ms: miss rate {float(rate):.4f} > allowed {s.allowed_miss_rate}",
              file=sys.stderr)
    return EXIT_SLO if missed else EXIT_OK


def cmd_serve(args) -> int:
    from .server import serve

    cfg = _load(args.config)
    host = args.host or cfg.serve.host
    port = cfg.serve.port if args.port is None else args.port
    try:
        d = deploy(cfg)
    except Infeasible as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    try:
        asyncio.run(serve(d, host, port, cfg.mode, ready=lambda a: print(f"listening on {a[0]}:{a[1]}", flush=True)))
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def read_queries(path) -> tuple[list[bench.QueryRow], list[float]]:
    rows, slos = [], []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for col in reader.fieldnames or []:
            if col.startswith("miss_") and col.endswith("ms"):
                slos.append(float(col[5:-2]))
        for r in reader:
            rows.append(bench.QueryRow(int(r["query_id"]), int(r["phase"]), int(r["arrival_us"]), int(r["ingress_us"]),
                                       int(r["egress_us"]) if r["egress_us"] else None, r["path"]))
    return rows, slos


def cmd_report(args) -> int:
    path = os.path.join(args.dir, "queries.csv")
    try:
        rows, slos = read_queries(path)
    except OSError as e:
        print(f"cannot read {path}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    report = bench.RunReport(rows, slos=[bench.SLOTarget(ms) for ms in slos])
    lat = report.latencies()
    p5, p50, p95, mean = bench.latency_stats(lat)
    print(f"queries={len(rows)} completed={len(lat)}")
    print(f"p5={bench.fmt_us_as_ms(p5)}ms p50={bench.fmt_us_as_ms(p50)}ms p95={bench.fmt_us_as_ms(p95)}ms "
          f"mean={mean / 1000:.3f}ms")
    for ms, r in report.miss_rates().items():
        print(f"miss@{bench.fmt_ms(ms)}ms={r.numerator}/{r.denominator} ({float(r):.4f})")
    if args.svg:
        with open(os.path.join(args.dir, "latency.svg"), "w") as f:
            f.write(bench.latency_svg(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slopipe", description="SLO-first pipeline serving, simulated.")
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("plan", help="compute a placement and print it")
    sp.add_argument("config")
    sp.add_argument("--baseline", choices=["monolithic"], help="emit the baseline instead of the plan")
    sp.add_argument("--nodes", type=int, help="override cluster.nodes")
    sp.add_argument("--out", help="write placement JSON here")
    sp.set_defaults(fn=cmd_plan)

    sb = sub.add_parser("bench", help="run the configured workload and write reports")
    sb.add_argument("config")
    sb.add_argument("--out", default="out")
    sb.add_argument("--seed", type=int)
    sb.add_argument("--baseline", choices=["monolithic"])
    sb.add_argument("--rates", help="comma-separated offered rates for a load sweep")
    sb.add_argument("--svg", action="store_true", help="also render SVG plots")
    g = sb.add_mutually_exclusive_group()
    g.add_argument("--preload", dest="preload", action="store_true", default=None)
    g.add_argument("--no-preload", dest="preload", action="store_false")
    sb.set_defaults(fn=cmd_bench)

    sv = sub.add_parser("serve", help="accept JSON-lines queries over TCP")
    sv.add_argument("config")
    sv.add_argument("--host")
    sv.add_argument("--port", type=int)
    sv.set_defaults(fn=cmd_serve)

    sr = sub.add_parser("report", help="summarize a bench output directory")
    sr.add_argument("dir")
    sr.add_argument("--svg", action="store_true")
    sr.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SLOPIPE_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, IoError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
