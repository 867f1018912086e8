"""Build and run a deployment described by a :class:`DeploymentConfig`."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

from . import bench
from .bench import Phase, RunReport, WorkloadSpec
from .config import DeploymentConfig
from .elasticity import Autoscaler, Controller
from .executor import SimExecutor
from .planner import Placement, PlacementProblem, monolithic_baseline, plan
from .runtime import PipelineSpec, Runtime
from .simloop import EventLoop


def problem_for(cfg: DeploymentConfig, profiles, spec: PipelineSpec) -> PlacementProblem:
    caps: dict[str, int] = {}
    for s in spec.stages:
        caps[s.model_id] = min(caps.get(s.model_id, s.max_batch), s.max_batch)
    components = {s.stage_id: s.model_id for s in spec.stages}
    return PlacementProblem.uniform(cfg.cluster.nodes, components, profiles, tuple(map(tuple, cfg.cluster.layouts)),
                                    cfg.cluster.gpu_gb, max_batch=caps)


def placement_for(cfg: DeploymentConfig, problem: PlacementProblem, baseline: str | None = None) -> Placement:
    which = baseline or cfg.placement
    if which == "auto":
        return plan(problem)
    if which == "monolithic":
        return monolithic_baseline(problem)
    with open(cfg.resolve(which)) as f:
        return Placement.from_json(json.load(f))


@dataclass
class Deployment:
    cfg: DeploymentConfig
    spec: PipelineSpec
    placement: Placement
    loop: EventLoop
    executor: SimExecutor
    runtime: Runtime
    standby: dict[str, list[str]]
    scaler: Autoscaler | None
    controller: Controller | None


def deploy(cfg: DeploymentConfig, placement: Placement | None = None, preloading: bool | None = None,
           profiles=None) -> Deployment:
    profiles = profiles or cfg.load_profiles()
    spec = cfg.load_pipeline()
    if placement is None:
        placement = placement_for(cfg, problem_for(cfg, profiles, spec))
    loop = EventLoop()
    ex = SimExecutor(loop, profiles, load_delay_ms=cfg.load_delay_ms, jitter=cfg.jitter, seed=cfg.seed)
    rt = Runtime(loop, ex, seed=cfg.seed)
    layouts = dict(placement.layouts)
    standby: dict[str, list[str]] = {}
    node = max(layouts, default=-1) + 1
    for stage in sorted(cfg.standby):
        for _ in range(cfg.standby[stage]):
            layouts[node] = (cfg.cluster.gpu_gb,)
            standby.setdefault(stage, []).append(f"n{node}.i0")
            node += 1
    for n, lay in sorted(layouts.items()):
        ex.partition_node(n, lay)
    rt.load_pipeline(spec, placement, standby=standby)
    scaler = ctl = None
    el = cfg.elasticity
    if el.enabled:
        ctl = Controller(el.thresholds, preloading=el.preloading if preloading is None else preloading)
        stages = el.stages or spec.stage_ids
        per = {}
        for s in stages:
            pool = rt.pipeline(spec.name).pools[s]
            size = ex.instance(pool.members[0]).size
            op = profiles[spec.stage(s).model_id].operating_point(size, spec.stage(s).max_batch)
            per[s] = op.throughput_qps if op else 0.0
        scaler = Autoscaler(rt, spec.name, stages, ctl, tick_us=int(el.tick_ms * 1000), per_replica_qps=per)
    return Deployment(cfg, spec, placement, loop, ex, rt, standby, scaler, ctl)


def _schedule_resizes(d: Deployment, arr: list[bench.Arrival]) -> list[tuple]:
    log: list[tuple] = []
    rt, ex, loop, name = d.runtime, d.executor, d.loop, d.spec.name

    def join(stage, inst_name):
        inst = ex.instance(inst_name)
        if inst.state == "preloading":
            loop.call_at(min(inst.loading.values()), join, stage, inst_name)
            return
        if inst_name in rt.pipeline(name).pools[stage].active:
            return
        rt.activate(name, stage, inst_name, allow_cold=inst.state == "empty")
        log.append((loop.now, "Activate", stage, inst.node, inst_name, len(rt.pipeline(name).pools[stage].active)))

    def grow(stage, k):
        pool = rt.pipeline(name).pools[stage]
        idle = [n for n in d.standby.get(stage, []) if n not in pool.active]
        for inst_name in idle[:k]:
            join(stage, inst_name)

    for step in d.cfg.resize:
        if 1 <= step.at_query <= len(arr):
            loop.call_at(arr[step.at_query - 1].t_us, grow, step.stage, step.add)
    return log


@dataclass
class BenchResult:
    report: RunReport
    deployments: list[Deployment]
    actions: list[tuple]


def run_workload(d: Deployment, work: WorkloadSpec) -> tuple[RunReport, list[tuple]]:
    work = WorkloadSpec(work.phases, work.seed, d.spec.name)
    arr = bench.arrivals(work, 0)
    resize_log = _schedule_resizes(d, arr)
    if d.scaler is not None:
        d.scaler.start()
    bench.generate(d.runtime, work, start_us=0)
    pipe = d.runtime.pipeline(d.spec.name)
    last = arr[-1].t_us if arr else 0
    d.loop.run(stop=lambda: d.loop.now >= last and pipe.in_flight == 0 and pipe.submitted == len(arr))
    if d.scaler is not None:
        d.scaler.stop()
    rows = bench.rows_from_runtime(d.runtime, d.spec.name)
    report = RunReport(rows, slos=list(d.cfg.slos))
    windows = bench.phase_windows(work, arr)
    for i, ph in enumerate(work.phases):
        w = bench.steady_window(windows[i])
        sel = [r for r in rows if r.phase == i and w[0] <= r.arrival_us <= w[1]]
        if sel and w[1] > w[0]:
            report.curve.append(bench.curve_row(sel, ph.rate_qps, report.slos, w, rows))
    end = max((r.egress_us or r.ingress_us for r in rows), default=0)
    if end > 0:
        report.gract_rows = d.executor.gract_rows(0, end, 1_000_000)
    actions = sorted((d.controller.log if d.controller else []) + resize_log)
    return report, actions


def run_bench(cfg: DeploymentConfig, preloading: bool | None = None, rates: list[float] | None = None,
              baseline: str | None = None) -> BenchResult:
    if cfg.workload is None:
        raise ValueError("config has no workload")
    profiles = cfg.load_profiles()
    spec = cfg.load_pipeline()
    placement = placement_for(cfg, problem_for(cfg, profiles, spec), baseline)
    if not rates:
        d = deploy(cfg, placement, preloading, profiles)
        report, actions = run_workload(d, cfg.workload)
        return BenchResult(report, [d], actions)
    curve, deps, actions = [], [], []
    report = None
    base = cfg.workload.phases[0]
    for rate in rates:
        d = deploy(cfg, placement, preloading, profiles)
        ph = Phase(rate, base.count, base.duration_s, base.arrival)
        report, acts = run_workload(d, WorkloadSpec([ph], cfg.workload.seed))
        curve.extend(report.curve)
        deps.append(d)
        actions.extend(acts)
    report.curve = curve
    return BenchResult(report, deps, actions)


def write_outputs(result: BenchResult, outdir: str, svg: bool = False) -> list[str]:
    paths = bench.emit_report(result.report, outdir, svg=svg)
    d = result.deployments[-1]
    p = os.path.join(outdir, "exec_log.csv")
    d.runtime.write_exec_log(p)
    paths.append(p)
    p = os.path.join(outdir, "actions.csv")
    ctl = Controller()
    ctl.log = list(result.actions)
    ctl.write_log(p)
    paths.append(p)
    p = os.path.join(outdir, "placement.json")
    with open(p, "w") as f:
        json.dump(d.placement.to_json(), f, indent=2)
        f.write("\n")
    paths.append(p)
    return paths
