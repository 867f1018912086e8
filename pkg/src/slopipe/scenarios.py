"""Simulated experiments: resize under a surge, packing, batch sweep, incast.

Each function builds a fresh event loop, executor and runtime from its
arguments, so repeated calls with the same seed are identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from . import bench
from .bench import Phase, RunReport, WorkloadSpec
from .elasticity import Autoscaler, Controller, Thresholds
from .executor import SimExecutor
from .planner import Placement, PlacementProblem, Replica, monolithic_baseline, plan
from .runtime import PipelineSpec, Runtime
from .simloop import EventLoop
from .synthetic import (
    RETRIEVAL_STAGES,
    encoder_profile,
    retrieval_pipeline_doc,
    retrieval_profiles,
    sublinear_profile,
)


def single_stage_doc(name: str = "encode", model: str = "encoder", max_batch: int = 16) -> dict:
    return {
        "name": name,
        "ingress": "ingress",
        "egress": "E",
        "stages": [{"id": "E", "model": model, "max_batch": max_batch, "incast": ["ingress"]}],
        "edges": [["ingress", "E"]],
    }


def per_replica_qps(profiles, model: str, size: int, max_batch: int) -> float:
    op = profiles[model].operating_point(size, max_batch)
    return op.throughput_qps if op else 0.0


# --------------------------------------------------------------------------
# resize under a surge


@dataclass
class ResizeConfig:
    phase1_count: int = 2000
    phase1_qps: float = 70.0
    phase2_count: int = 4000
    phase2_qps: float = 130.0
    resize_at_query: int = 4000
    window: tuple[int, int] = (4000, 6000)
    initial: int = 4
    added: int = 3
    load_delay_ms: float = 3000.0
    max_batch: int = 16
    jitter: float = 0.05
    seed: int = 0
    thresholds: Thresholds = field(default_factory=lambda: Thresholds(target=0.5))


@dataclass
class ResizeResult:
    report: RunReport
    steady_p95_us: int
    window_p95_us: int
    lost: int
    preloaded: bool
    actions: list[tuple]
    cold_starts: int

    @property
    def ratio(self) -> float:
        return self.window_p95_us / self.steady_p95_us


def resize_run(preload: bool, cfg: ResizeConfig | None = None) -> ResizeResult:
    """Two-phase surge; ``cfg.added`` standby instances join at a fixed query.

    With ``preload`` the elasticity controller watches the load and preloads
    the model onto standby instances once the surge is detected, so they are
    ready when the resize happens. Without it the standby instances join
    empty and load the model on their first batch.
    """
    cfg = cfg or ResizeConfig()
    profiles = encoder_profile()
    loop = EventLoop()
    ex = SimExecutor(loop, profiles, load_delay_ms=cfg.load_delay_ms, jitter=cfg.jitter, seed=cfg.seed)
    rt = Runtime(loop, ex, seed=cfg.seed)
    n = cfg.initial + cfg.added
    placement = Placement({k: (24,) for k in range(n)}, [Replica("encoder", k, 0, 24) for k in range(cfg.initial)])
    spec = PipelineSpec.from_json(single_stage_doc(max_batch=cfg.max_batch))
    standby = [f"n{k}.i0" for k in range(cfg.initial, n)]
    rt.load_pipeline(spec, placement, standby={"E": standby})

    ctl = Controller(cfg.thresholds, preloading=True)
    if preload:
        scaler = Autoscaler(rt, spec.name, ["E"], ctl,
                            per_replica_qps={"E": per_replica_qps(profiles, "encoder", 24, cfg.max_batch)})
        scaler.start()

    work = WorkloadSpec([Phase(cfg.phase1_qps, count=cfg.phase1_count), Phase(cfg.phase2_qps, count=cfg.phase2_count)],
                        seed=cfg.seed, pipeline=spec.name)
    arr = bench.arrivals(work, loop.now)
    resize_t = arr[cfg.resize_at_query - 1].t_us
    actions: list[tuple] = []

    def join(name):
        inst = ex.instance(name)
        if inst.state == "preloading":
            # still loading: join as soon as the load lands
            loop.call_at(min(inst.loading.values()), join, name)
            return
        rt.activate(spec.name, "E", name, allow_cold=inst.state == "empty")
        actions.append((loop.now, "Activate", "E", inst.node, name, len(rt.pipeline(spec.name).pools["E"].active)))

    def resize():
        for name in standby:
            join(name)

    loop.call_at(resize_t, resize)  # scheduled first, so it runs before that query's submission
    bench.generate(rt, work, start_us=0)
    total = cfg.phase1_count + cfg.phase2_count
    loop.run(stop=lambda: rt.pipeline(spec.name).completed + rt.pipeline(spec.name).failed >= total
             and loop.now > arr[-1].t_us)
    if preload:
        scaler.stop()
    rows = bench.rows_from_runtime(rt, spec.name)
    report = RunReport(rows)
    steady = bench.steady_window(bench.phase_windows(work, arr)[0])
    steady_lat = [r.latency_us for r in rows if r.latency_us is not None and steady[0] <= r.arrival_us <= steady[1]]
    lo, hi = cfg.window
    win_lat = [r.latency_us for r in rows if r.latency_us is not None and lo <= r.query_id <= hi]
    lost = sum(1 for r in rows if r.latency_us is None)
    log = sorted(ctl.log + actions)
    return ResizeResult(report, bench.latency_stats(steady_lat)[2], bench.latency_stats(win_lat)[2], lost,
                        preload, log, sum(ex.instance(s).cold_starts for s in standby))


# --------------------------------------------------------------------------
# placement runs: packing, GRACT, load sweeps


def retrieval_problem(n_nodes: int = 4, max_batch: int = 16) -> PlacementProblem:
    return PlacementProblem.uniform(n_nodes, RETRIEVAL_STAGES, retrieval_profiles(),
                                    max_batch={m: max_batch for m in RETRIEVAL_STAGES.values()})


@dataclass
class PlacementRun:
    report: RunReport
    runtime: Runtime
    executor: SimExecutor
    window: tuple[int, int]  # steady window, by arrival time


def run_placement(placement: Placement, profiles, spec_doc: dict, rate_qps: float, count: int,
                  seed: int = 0, jitter: float = 0.05, arrival: str = "constant",
                  gract_window_us: int = 1_000_000) -> PlacementRun:
    loop = EventLoop()
    ex = SimExecutor(loop, profiles, jitter=jitter, seed=seed)
    rt = Runtime(loop, ex, seed=seed)
    spec = PipelineSpec.from_json(spec_doc)
    rt.load_pipeline(spec, placement)
    work = WorkloadSpec([Phase(rate_qps, count=count, arrival=arrival)], seed=seed, pipeline=spec.name)
    arr = bench.generate(rt, work, start_us=0)
    loop.run()
    rows = bench.rows_from_runtime(rt, spec.name)
    window = bench.steady_window(bench.phase_windows(work, arr)[0])
    steady_rows = [r for r in rows if window[0] <= r.arrival_us <= window[1]]
    report = RunReport(rows)
    report.curve.append(bench.curve_row(steady_rows, rate_qps, report.slos, window, rows))
    end = max(r.egress_us or r.ingress_us for r in rows)
    report.gract_rows = ex.gract_rows(0, end, gract_window_us)
    return PlacementRun(report, rt, ex, window)


@dataclass
class PackingResult:
    problem: PlacementProblem
    planned: Placement
    baseline: Placement
    planned_run: PlacementRun
    baseline_run: PlacementRun
    dedicated_b_nodes: list[int]
    planned_gract: dict[int, float]
    baseline_gract: dict[int, float]

    @property
    def throughput_ratio(self) -> float:
        return min(self.planned.throughput.values()) / min(self.baseline.throughput.values())

    @property
    def dedicated_b_mean(self) -> float:
        return sum(self.planned_gract[n] for n in self.dedicated_b_nodes) / len(self.dedicated_b_nodes)


def dedicated_nodes(placement: Placement, model: str) -> list[int]:
    groups = placement.slot_groups()
    out = []
    for n in sorted(placement.layouts):
        hosted = [ms for (node, _), ms in groups.items() if node == n]
        if hosted and all(ms == [model] for ms in hosted):
            out.append(n)
    return out


def packing_run(n_nodes: int = 4, load_fraction: float = 0.9, count: int = 3000, seed: int = 0,
                jitter: float = 0.05) -> PackingResult:
    """Planned vs monolithic placement, each driven at a fraction of its own capacity.

    Capacity is the planner's minimum component throughput; ``load_fraction``
    of it is taken as the peak sustainable load. GRACT per node is measured
    over the steady window.
    """
    problem = retrieval_problem(n_nodes)
    planned, baseline = plan(problem), monolithic_baseline(problem)
    doc = retrieval_pipeline_doc()
    runs = []
    for pl in (planned, baseline):
        rate = load_fraction * min(pl.throughput.values())
        runs.append(run_placement(pl, problem.profiles, doc, rate, count, seed=seed, jitter=jitter))
    gr = []
    for run in runs:
        a, b = run.window
        gr.append({n: run.executor.node_gract(n, a, b) for n in sorted(run.executor.nodes)})
    return PackingResult(problem, planned, baseline, runs[0], runs[1], dedicated_nodes(planned, RETRIEVAL_STAGES["B"]),
                         gr[0], gr[1])


def load_sweep(placement: Placement, profiles, spec_doc: dict, rates: list[float], count: int,
               seed: int = 0, jitter: float = 0.05) -> RunReport:
    """One curve row per offered rate; query rows and GRACT come from the last rate."""
    report = None
    curve = []
    for rate in rates:
        run = run_placement(placement, profiles, spec_doc, rate, count, seed=seed, jitter=jitter)
        curve.extend(run.report.curve)
        report = run.report
    report.curve = curve
    return report


# --------------------------------------------------------------------------
# batch-size sweep


@dataclass
class SweepPoint:
    max_batch: int
    measured_qps: float
    analytic_qps: float


def batch_sweep(caps=(1, 2, 4, 8, 16, 32), offered_qps: float = 300.0, duration_s: float = 20.0,
                seed: int = 0, jitter: float = 0.05) -> list[SweepPoint]:
    """Saturate one instance at each batch cap and measure completions per second.

    The offered rate exceeds the best batch throughput, so the queue never
    empties after warm-up and every batch is full.
    """
    profiles = sublinear_profile()
    out = []
    for cap in caps:
        loop = EventLoop()
        ex = SimExecutor(loop, profiles, jitter=jitter, seed=seed)
        rt = Runtime(loop, ex, seed=seed)
        spec = PipelineSpec.from_json(single_stage_doc(max_batch=cap))
        rt.load_pipeline(spec, Placement({0: (24,)}, [Replica("encoder", 0, 0, 24)]))
        work = WorkloadSpec([Phase(offered_qps, duration_s=duration_s)], seed=seed, pipeline=spec.name)
        bench.generate(rt, work, start_us=0)
        end = int(duration_s * 1e6)
        loop.run(until=end)
        a, b = bench.steady_window((0, end))
        done = sum(1 for iv in ex.instance("n0.i0").busy if a <= iv.end < b for _ in range(iv.batch))
        analytic = cap / _latency(profiles, cap) * 1000
        out.append(SweepPoint(cap, done * 1e6 / (b - a), analytic))
    return out


def _latency(profiles, b: int) -> float:
    from .executor import latency_model
    return latency_model(profiles["encoder"], 24, b)


# --------------------------------------------------------------------------
# incast routing


def incast_placement() -> Placement:
    """Three full-GPU vision encoders, and two quartered GPUs with three C instances between them."""
    layouts = {0: (24,), 1: (24,), 2: (24,), 3: (6, 6, 6, 6), 4: (6, 6, 6, 6)}
    m = RETRIEVAL_STAGES
    reps = [Replica(m["B"], n, 0, 24) for n in range(3)]
    reps += [Replica(m["A"], 3, 0, 6), Replica(m["C"], 3, 1, 6), Replica(m["C"], 3, 2, 6), Replica(m["D"], 3, 3, 6)]
    reps += [Replica(m["C"], 4, 0, 6), Replica(m["D"], 4, 1, 6), Replica(m["A"], 4, 2, 6), Replica(m["D"], 4, 3, 6)]
    return Placement(layouts, reps)


def incast_run(n_queries: int = 10_000, rate_qps: float = 90.0, seed: int = 0,
               handoff_jitter_us: int = 5_000, jitter: float = 0.05) -> Runtime:
    """Drive the retrieval DAG with jittered handoffs so A and B outputs interleave at random."""
    profiles = retrieval_profiles()
    loop = EventLoop()
    ex = SimExecutor(loop, profiles, jitter=jitter, seed=seed)
    rt = Runtime(loop, ex, seed=seed, handoff_jitter_us=handoff_jitter_us)
    spec = PipelineSpec.from_json(retrieval_pipeline_doc())
    rt.load_pipeline(spec, incast_placement())
    work = WorkloadSpec([Phase(rate_qps, count=n_queries, arrival="poisson")], seed=seed, pipeline=spec.name)
    bench.generate(rt, work, start_us=0)
    loop.run()
    return rt


def incast_violations(rt: Runtime, pipeline: str = "preflmr", stage: str = "C") -> dict[str, int]:
    """Count routing, purity and exactly-once violations from the runtime's logs."""
    pipe = rt.pipeline(pipeline)
    inputs = pipe.spec.inputs_of(stage)
    prefix = pipe.prefix(stage) + "/"
    delivered: dict[int, dict[str, tuple[str, int]]] = {}
    for shard, replica, _, op, key, _, ts in rt.kvs.events:
        if op.startswith("trigger") and key.startswith(prefix):
            _, _, _, qid, up = key.split("/")
            delivered.setdefault(int(qid), {})[up] = (replica, ts)
    routing = sum(1 for d in delivered.values() if len({inst for inst, _ in d.values()}) != 1)
    purity = 0
    for b in rt.logs["batches"]:
        if b.pipeline != pipeline or b.stage_id != stage:
            continue
        for qid in b.members:
            d = delivered.get(qid, {})
            if sorted(d) != sorted(inputs) or any(inst != b.instance or ts > b.formed_ts for inst, ts in d.values()):
                purity += 1
    seen: dict[tuple[int, str], int] = {}
    for row in rt.exec_rows():
        seen[row[0], row[1]] = seen.get((row[0], row[1]), 0) + 1
    expected = {(q, s) for q in pipe.records for s in pipe.order}
    once = sum(1 for k in expected if seen.get(k, 0) != 1) + sum(1 for k in seen if k not in expected)
    return {"routing": routing, "purity": purity, "exactly_once": once,
            "incomplete": pipe.submitted - pipe.completed}
