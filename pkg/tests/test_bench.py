import csv
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from oracles import nearest_rank as oracle_rank
from slopipe import bench
from slopipe.bench import (Phase, QueryRow, RunReport, SLOTarget, WorkloadSpec, arrivals, latency_stats, slo_miss_rate,
                           sustained_throughput)
from slopipe.errors import BadRange, IoError, NoData, NoSuchPipeline
from slopipe.executor import ComponentProfile, ProfileEntry
from slopipe.scenarios import load_sweep, retrieval_problem, run_placement
from slopipe.planner import plan
from slopipe.synthetic import retrieval_pipeline_doc


def test_constant_rate_count():
    arr = arrivals(WorkloadSpec([Phase(100, duration_s=10)]))
    assert abs(len(arr) - 1000) <= 1
    assert arr[1].t_us - arr[0].t_us == 10_000


def test_poisson_seeded_identical():
    spec = WorkloadSpec([Phase(100, duration_s=10, arrival="poisson")], seed=4)
    a, b = arrivals(spec), arrivals(spec)
    assert a == b
    assert a != arrivals(WorkloadSpec(spec.phases, seed=5))
    assert 850 <= len(a) <= 1150


def test_two_phase_switches_at_query_2000():
    arr = arrivals(WorkloadSpec([Phase(70, count=2000), Phase(130, count=4000)]))
    assert len(arr) == 6000
    assert [a.phase for a in arr[1998:2002]] == [0, 0, 1, 1]
    assert arr[2000].t_us - arr[1999].t_us == round(1e6 / 70)
    assert arr[2001].t_us - arr[2000].t_us in (7692, 7693)


def test_generate_unknown_pipeline():
    class Dummy:
        pipelines = {}
    with pytest.raises(NoSuchPipeline):
        bench.generate(Dummy(), WorkloadSpec([Phase(1, count=1)], pipeline="x"))


def test_latency_stats_examples():
    assert latency_stats([10]) == (10, 10, 10, 10)
    p5, p50, p95, mean = latency_stats(range(1, 101))
    assert (p5, p50, p95, mean) == (5, 50, 95, 50.5)
    with pytest.raises(NoData):
        latency_stats([])


@given(st.lists(st.integers(0, 10**7), min_size=1, max_size=300))
def test_percentiles_match_sort_oracle(xs):
    p5, p50, p95, mean = latency_stats(xs)
    assert (p5, p50, p95) == tuple(oracle_rank(xs, p) for p in (5, 50, 95))
    assert p5 <= p50 <= p95


def test_miss_rate_examples():
    assert slo_miss_rate([100_000, 300_000, 600_000], SLOTarget(500)) == Fraction(1, 3)
    assert slo_miss_rate([1, 2, 3], SLOTarget(500)) == 0
    assert slo_miss_rate([500_000], 500) == 0  # strictly greater counts as a miss
    with pytest.raises(NoData):
        slo_miss_rate([], 200)


@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=200), st.floats(1, 999), st.floats(1, 999))
def test_miss_rate_non_increasing_in_target(xs, a, b):
    lo, hi = min(a, b), max(a, b)
    assert slo_miss_rate(xs, hi) <= slo_miss_rate(xs, lo)
    assert 0 <= slo_miss_rate(xs, lo) <= 1


def rows_for(done_times, ingress=0):
    return [QueryRow(i, 0, ingress, ingress, t, "") for i, t in enumerate(done_times)]


def test_sustained_throughput():
    rows = rows_for([i * 10_000 + 1 for i in range(1001)])
    assert sustained_throughput(rows, (0, 10_000_000)).qps == pytest.approx(100)
    with pytest.raises(BadRange):
        sustained_throughput(rows, (0, 99_000_000))
    # arrivals every 10 ms, completions every 20 ms: in-flight keeps growing
    slow = [QueryRow(i, 0, i * 10_000, i * 10_000, i * 20_000 + 1, "") for i in range(500)]
    assert sustained_throughput(slow, (1_000_000, 4_000_000)).backlog
    fast = [QueryRow(i, 0, i * 10_000, i * 10_000, i * 10_000 + 5000, "") for i in range(500)]
    assert not sustained_throughput(fast, (1_000_000, 4_000_000)).backlog


def test_piecewise_throughput_matches_recount():
    rng = random.Random(0)
    rows = []
    t = 0
    for phase, rate in enumerate((50, 120)):
        for _ in range(600):
            t += int(1e6 / rate)
            rows.append(QueryRow(len(rows), phase, t, t, t + rng.randint(1000, 8000), ""))
    for phase in (0, 1):
        sel = [r for r in rows if r.phase == phase]
        w = (sel[0].ingress_us, sel[-1].ingress_us)
        count = sum(1 for r in rows if w[0] <= r.egress_us < w[1])
        assert sustained_throughput(rows, w).qps == pytest.approx(count * 1e6 / (w[1] - w[0]))


@pytest.fixture(scope="module")
def small_run():
    prob = retrieval_problem(2)
    return run_placement(plan(prob), prob.profiles, retrieval_pipeline_doc(), 20, 300, seed=1)


def test_emit_report_files(tmp_path, small_run):
    paths = bench.emit_report(small_run.report, tmp_path, svg=True)
    names = sorted(p.rsplit("/", 1)[1] for p in paths)
    assert names == ["curve.csv", "gract.csv", "gract.svg", "latency.svg", "queries.csv"]
    with open(tmp_path / "queries.csv") as f:
        header = next(csv.reader(f))
    assert header == ["query_id", "phase", "arrival_us", "ingress_us", "egress_us", "latency_us",
                      "miss_200ms", "miss_500ms", "path"]
    with open(tmp_path / "curve.csv") as f:
        header = next(csv.reader(f))
    assert header == ["offered_qps", "p5_ms", "p50_ms", "p95_ms", "miss_rate_200", "miss_rate_500", "achieved_qps"]


def test_curve_has_one_row_per_level(tmp_path):
    prob = retrieval_problem(2)
    rep = load_sweep(plan(prob), prob.profiles, retrieval_pipeline_doc(), [10, 15, 20, 25, 30], 200)
    bench.write_curve(rep, tmp_path / "curve.csv")
    assert len((tmp_path / "curve.csv").read_text().splitlines()) == 6


def test_gract_csv_matches_interval_oracle(tmp_path, small_run):
    bench.write_gract(small_run.report.gract_rows, tmp_path / "g.csv")
    ex = small_run.executor
    with open(tmp_path / "g.csv") as f:
        rows = list(csv.DictReader(f))
    run_end = max(rr.egress_us or rr.ingress_us for rr in small_run.report.rows)
    assert len(rows) == len(ex.instances()) * -(-run_end // 1_000_000)
    for r in rows:
        inst = ex.instance(r["instance"])
        t0 = int(r["window_start_us"])
        t1 = min(t0 + 1_000_000, run_end)
        # independent recount: weighted overlap of every busy interval with the window
        tot = sum(max(0, min(iv.end, t1) - max(iv.start, t0)) * iv.weight for iv in inst.busy)
        assert float(r["gract"]) == pytest.approx(min(1.0, tot / (t1 - t0)), abs=1e-12)


def test_unwritable_path_raises(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoError):
        bench.emit_report(RunReport(rows_for([5])), blocker / "sub")


def test_open_loop_arrivals_ignore_system_speed():
    prob = retrieval_problem(2)
    fast = run_placement(plan(prob), prob.profiles, retrieval_pipeline_doc(), 30, 200, seed=2)
    slow_profiles = {m: ComponentProfile(m, [ProfileEntry(e.size, e.batch, e.latency_ms * 5, e.throughput_qps / 5,
                                                          e.memory_gb, e.compute_fraction) for e in p.entries])
                     for m, p in prob.profiles.items()}
    slow = run_placement(plan(prob), slow_profiles, retrieval_pipeline_doc(), 30, 200, seed=2)
    assert [r.arrival_us for r in fast.report.rows] == [r.arrival_us for r in slow.report.rows]
    assert fast.report.stats()[1] < slow.report.stats()[1]


def test_fmt_us_as_ms_exact():
    assert bench.fmt_us_as_ms(1234567) == "1234.567"
    assert bench.fmt_us_as_ms(5) == "0.005"
