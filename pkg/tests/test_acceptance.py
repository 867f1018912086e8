"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""
import csv
import os
import time
from fractions import Fraction

import pytest

import kvs_fuzz
from conftest import RESULTS
from oracles import lex_optimum, nearest_rank, random_instance
from slopipe import cli
from slopipe.errors import Infeasible
from slopipe.planner import DEFAULT_LAYOUTS, PlacementProblem, plan
from slopipe.scenarios import batch_sweep, incast_run, incast_violations, packing_run, resize_run

DATA = os.path.join(os.path.dirname(cli.__file__), "data")


def verdict(n, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} ({detail})"
    print(line)
    RESULTS.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def packing():
    t = time.perf_counter()
    r = packing_run()
    return r, time.perf_counter() - t


def test_1_planner_matches_enumeration():
    t = time.perf_counter()
    mismatches = []
    for seed in range(100):
        comps, profs, n = random_instance(seed)
        best = lex_optimum(comps, profs, n, DEFAULT_LAYOUTS)
        t0 = time.perf_counter()
        try:
            got = tuple(sorted(plan(PlacementProblem.uniform(n, comps, profs)).throughput.values()))
        except Infeasible:
            got = None
        if got != (best if best[0] > 0 else None):
            mismatches.append(seed)
    elapsed = time.perf_counter() - t
    verdict(1, "planner equals exhaustive oracle", not mismatches and elapsed < 60,
            f"{100 - len(mismatches)}/100 equal, {elapsed:.1f}s")


def test_2_packing_dominance(packing):
    r, elapsed = packing
    ratio = r.throughput_ratio
    verdict(2, "planned min throughput >= 1.5x monolithic", ratio >= 1.5 and elapsed < 10,
            f"ratio {ratio:.3f}, {elapsed:.1f}s")


def test_3_batch_tuning_shape():
    t = time.perf_counter()
    pts = batch_sweep()
    elapsed = time.perf_counter() - t
    qps = [p.measured_qps for p in pts]
    peak = max(range(len(qps)), key=qps.__getitem__)
    rising = all(a <= b for a, b in zip(qps[:peak + 1], qps[1:peak + 1]))
    flat = all(q >= 0.95 * qps[peak] for q in qps[peak:])
    close = all(abs(p.measured_qps - p.analytic_qps) <= 0.05 * p.analytic_qps for p in pts)
    worst = max(abs(p.measured_qps / p.analytic_qps - 1) for p in pts)
    verdict(3, "throughput rises to a plateau and tracks b/L(b)", rising and flat and close and elapsed < 30,
            f"peak at b={pts[peak].max_batch}, worst analytic gap {worst:.2%}, {elapsed:.1f}s")


def test_4_preload_efficacy():
    t = time.perf_counter()
    cold = resize_run(preload=False)
    warm = resize_run(preload=True)
    elapsed = time.perf_counter() - t
    ok = (cold.ratio >= 2.0 and warm.ratio <= 1.25 and cold.lost == 0 and warm.lost == 0
          and len(cold.report.rows) == len(warm.report.rows) == 6000 and elapsed < 60)
    verdict(4, "preloading removes the resize spike", ok,
            f"no preload {cold.ratio:.2f}x, preload {warm.ratio:.2f}x steady p95, lost {cold.lost}/{warm.lost}, "
            f"{elapsed:.1f}s")


def test_5_kvs_consistency():
    t = time.perf_counter()
    props = {
        "version contiguity": kvs_fuzz.version_contiguity,
        "replica trigger order": kvs_fuzz.replica_trigger_order,
        "get_at determinism": kvs_fuzz.get_at_determinism,
        "too-old rejection": kvs_fuzz.too_old_rejection,
        "read-your-writes": kvs_fuzz.read_your_writes,
    }
    found = {name: fn(seed=2024, ops=10_000) for name, fn in props.items()}
    elapsed = time.perf_counter() - t
    verdict(5, "store consistency fuzz", sum(found.values()) == 0 and elapsed < 30,
            ", ".join(f"{k} {v}" for k, v in found.items()) + f", {elapsed:.1f}s")


def test_6_incast_routing():
    t = time.perf_counter()
    rt = incast_run(n_queries=10_000)
    v = incast_violations(rt)
    elapsed = time.perf_counter() - t
    n_c = len(rt.pipeline("preflmr").pools["C"].active)
    verdict(6, "incast routing invariance", n_c == 3 and sum(v.values()) == 0 and elapsed < 60,
            ", ".join(f"{k} {x}" for k, x in v.items()) + f", {n_c} C instances, {elapsed:.1f}s")


# -- criteria 7 and 8 run the CLI twice per config and check the emitted files


def bench_twice(tmp_path_factory, name, extra=()):
    outs = []
    for k in range(2):
        out = tmp_path_factory.mktemp(f"{name.split('.')[0]}{k}")
        code = cli.main(["bench", os.path.join(DATA, name), "--out", str(out), *extra])
        assert code in (cli.EXIT_OK, cli.EXIT_SLO)
        outs.append(out)
    return outs


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return {
        "preflmr": bench_twice(tmp_path_factory, "preflmr_4node.json"),
        "resize-preload": bench_twice(tmp_path_factory, "resize.json", ["--preload"]),
        "resize-cold": bench_twice(tmp_path_factory, "resize.json", ["--no-preload"]),
        "sweep": bench_twice(tmp_path_factory, "sweep.json", ["--rates", "10,20,30,40,50"]),
    }


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def ms(us: int) -> str:
    return f"{us // 1000}.{us % 1000:03d}"


def recount(outdir):
    """Rebuild curve.csv from queries.csv with nothing but sorting and counting."""
    rows = read_csv(outdir / "queries.csv")
    curve = read_csv(outdir / "curve.csv")
    mismatches = 0
    by_phase = {}
    for r in rows:
        by_phase.setdefault(int(r["phase"]), []).append(r)
    for c in curve:
        if len(by_phase) > 1:
            idx = curve.index(c)
            phase_rows = by_phase[idx]
        else:
            phase_rows = by_phase[0]
        ts = sorted(int(r["arrival_us"]) for r in phase_rows)
        cut = (ts[-1] - ts[0]) // 10
        lo, hi = ts[0] + cut, ts[-1] - cut
        lat = [int(r["latency_us"]) for r in phase_rows if lo <= int(r["arrival_us"]) <= hi and r["latency_us"]]
        want = [ms(nearest_rank(lat, p)) for p in (5, 50, 95)]
        mismatches += want != [c["p5_ms"], c["p50_ms"], c["p95_ms"]]
        for target in (200, 500):
            miss = Fraction(sum(1 for x in lat if x > target * 1000), len(lat))
            mismatches += repr(float(miss)) != c[f"miss_rate_{target}"]
    # the per-query miss flags agree with the latencies
    for r in rows:
        if r["latency_us"]:
            for target in (200, 500):
                mismatches += int(r[f"miss_{target}ms"]) != int(int(r["latency_us"]) > target * 1000)
    return mismatches, len(curve)


def test_7_metrics_match_recount(runs):
    total, checked = 0, 0
    for name, outs in runs.items():
        if name == "sweep":
            continue  # each sweep level is its own run; the emitted queries.csv is the last level only
        bad, n = recount(outs[0])
        total += bad
        checked += n
    # sweep: recheck the last level against the last curve row
    sweep_rows = read_csv(runs["sweep"][0] / "queries.csv")
    lat = [int(r["latency_us"]) for r in sweep_rows]
    ts = sorted(int(r["arrival_us"]) for r in sweep_rows)
    cut = (ts[-1] - ts[0]) // 10
    steady = [int(r["latency_us"]) for r in sweep_rows if ts[0] + cut <= int(r["arrival_us"]) <= ts[-1] - cut]
    last = read_csv(runs["sweep"][0] / "curve.csv")[-1]
    total += [ms(nearest_rank(steady, p)) for p in (5, 50, 95)] != [last["p5_ms"], last["p50_ms"], last["p95_ms"]]
    checked += 1 + bool(lat)
    verdict(7, "percentiles and miss rates equal a recount of the CSVs", total == 0,
            f"{checked} curve rows checked, {total} mismatches")


def test_8_determinism(runs):
    differ = []
    for name, (a, b) in runs.items():
        for f in ("queries.csv", "curve.csv", "gract.csv"):
            if (a / f).read_bytes() != (b / f).read_bytes():
                differ.append(f"{name}/{f}")
    verdict(8, "same seed gives byte-identical reports", not differ,
            f"{len(runs) * 3 - len(differ)}/{len(runs) * 3} files identical")


def test_9_gract_contrast(packing):
    r, elapsed = packing
    ded = r.dedicated_b_mean
    worst = max(r.baseline_gract.values())
    verdict(9, "dedicated vision nodes busier than any monolithic node", ded > worst and elapsed < 60,
            f"dedicated mean {ded:.3f} vs monolithic max {worst:.3f}")
