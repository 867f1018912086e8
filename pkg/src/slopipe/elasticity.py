"""Surge detection and pool resizing.

Arrival rates are smoothed with an exponentially weighted moving average
whose weight depends on elapsed time: after ``dt`` seconds an observation
of rate ``r`` moves the estimate by ``alpha = 1 - 2**(-dt / half_life)``
of the gap. The controller compares the estimate with the capacity of the
active replicas and emits preload, activate and deactivate actions.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

from .errors import BadTransition

ACTION_COLUMNS = ["ts_us", "kind", "component", "node", "instance", "pool_size_after"]


@dataclass
class Thresholds:
    preload: float = 0.7
    activate: float = 0.9
    scale_down: float = 0.3
    hold_s: float = 10.0
    half_life_s: float = 2.0
    # utilization the preload count aims for once the new replicas are active
    target: float = 0.8
    floor: int = 1

    def __post_init__(self):
        if not 0 < self.scale_down < self.preload <= self.activate:
            raise ValueError("need 0 < scale_down < preload <= activate")
        if self.half_life_s <= 0 or self.hold_s < 0 or self.target <= 0 or self.floor < 1:
            raise ValueError("bad elasticity thresholds")


@dataclass
class LoadEstimate:
    component: str
    ewma_qps: float
    capacity_qps: float
    utilization: float = 0.0

    def __post_init__(self):
        self.utilization = self.ewma_qps / self.capacity_qps if self.capacity_qps > 0 else math.inf


@dataclass(frozen=True)
class ResizeAction:
    kind: str  # Preload | Activate | Deactivate
    component: str
    node: int
    instance: str
    issued_ts: int


@dataclass(frozen=True)
class CapacityAlert:
    component: str
    missing: int
    issued_ts: int


@dataclass
class PoolView:
    """What the controller knows about one component's pool.

    ``standby`` lists empty instances in preference order: those already
    caching the component's dependencies first, then by node id.
    """

    component: str
    per_replica_qps: float
    active: list[str]
    ready: list[str] = field(default_factory=list)
    preloading: list[str] = field(default_factory=list)
    standby: list[str] = field(default_factory=list)
    nodes: dict[str, int] = field(default_factory=dict)

    @property
    def capacity(self) -> float:
        return self.per_replica_qps * len(self.active)


class Ewma:
    def __init__(self, half_life_s: float, initial: float = 0.0):
        self.half_life_us = half_life_s * 1e6
        self.value = initial
        self.last: int | None = None

    def update(self, arrivals: int, now: int) -> float:
        if self.last is None:
            self.last = now
            return self.value
        dt = now - self.last
        if dt <= 0:
            return self.value
        rate = arrivals * 1e6 / dt
        alpha = 1.0 - 2.0 ** (-dt / self.half_life_us)
        self.value += alpha * (rate - self.value)
        self.last = now
        return self.value


class Controller:
    def __init__(self, thresholds: Thresholds | None = None, preloading: bool = True):
        self.th = thresholds or Thresholds()
        self.preloading = preloading
        self.rates: dict[str, Ewma] = {}
        self.low_since: dict[str, int | None] = {}
        self.last_deactivate: dict[str, int] = {}
        self.activated_at: dict[str, int] = {}
        self.alerts: list[CapacityAlert] = []
        self.log: list[tuple] = []  # ts_us, kind, component, node, instance, pool_size_after

    def observe(self, component: str, arrivals: int, now: int, capacity_qps: float) -> LoadEstimate:
        """Fold ``arrivals`` since the previous observation into the rate estimate."""
        ew = self.rates.setdefault(component, Ewma(self.th.half_life_s))
        return LoadEstimate(component, ew.update(arrivals, now), capacity_qps)

    def decide(self, est: LoadEstimate, pool: PoolView, now: int) -> list[ResizeAction]:
        th = self.th
        out: list[ResizeAction] = []
        u = est.utilization
        node = pool.nodes.get
        if u > th.preload and pool.per_replica_qps > 0:
            need = math.ceil((est.ewma_qps / th.target - pool.capacity) / pool.per_replica_qps)
            pending = len(pool.ready) + len(pool.preloading)
            want = need - pending
            if want > 0 and self.preloading:
                picks = pool.standby[:want]
                out.extend(ResizeAction("Preload", pool.component, node(n, -1), n, now) for n in picks)
                if want > len(picks):
                    self.alerts.append(CapacityAlert(pool.component, want - len(picks), now))
            if u > th.activate:
                extra = max(need, 1)
                if pool.ready:
                    out.extend(ResizeAction("Activate", pool.component, node(n, -1), n, now) for n in pool.ready[:extra])
                elif not self.preloading and pool.standby:
                    # reactive mode: bring empty instances in cold
                    out.extend(ResizeAction("Activate", pool.component, node(n, -1), n, now)
                               for n in pool.standby[:extra])
                elif want > 0 and not pool.standby and not pool.preloading:
                    if not self.alerts or self.alerts[-1].issued_ts != now:
                        self.alerts.append(CapacityAlert(pool.component, want, now))
            self.low_since[pool.component] = None
        elif u < th.scale_down:
            since = self.low_since.get(pool.component)
            if since is None:
                self.low_since[pool.component] = since = now
            hold = int(th.hold_s * 1e6)
            last = self.last_deactivate.get(pool.component)
            if (now - since >= hold and (last is None or now - last >= hold)
                    and len(pool.active) > th.floor):
                victim = pool.active[-1]
                if now - self.activated_at.get(victim, -hold) >= hold:
                    out.append(ResizeAction("Deactivate", pool.component, node(victim, -1), victim, now))
        else:
            self.low_since[pool.component] = None
        return out

    def record(self, action: ResizeAction, pool_size_after: int) -> None:
        if action.kind == "Activate":
            self.activated_at[action.instance] = action.issued_ts
        if action.kind == "Deactivate":
            self.last_deactivate[action.component] = action.issued_ts
        self.log.append((action.issued_ts, action.kind, action.component, action.node, action.instance, pool_size_after))

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(ACTION_COLUMNS)
            w.writerows(self.log)


class Autoscaler:
    """Drives a :class:`Controller` against a running pipeline.

    Each tick counts ingress arrivals since the previous tick, updates the
    estimate for every watched stage and applies the resulting actions to
    the executor and runtime.
    """

    def __init__(self, runtime, pipeline: str, stages: list[str], controller: Controller,
                 tick_us: int = 100_000, per_replica_qps: dict[str, float] | None = None):
        self.rt = runtime
        self.pipeline = pipeline
        self.stages = stages
        self.ctl = controller
        self.tick_us = tick_us
        self.per_replica = per_replica_qps or {}
        self.seen = 0
        self.running = False
        self.estimates: list[tuple[int, str, float, float]] = []

    def start(self) -> None:
        self.running = True
        self.seen = self.rt.pipeline(self.pipeline).submitted
        for s in self.stages:
            self.ctl.observe(s, 0, self.rt.loop.now, 0.0)
        self.rt.loop.call_later(self.tick_us, self._tick)

    def stop(self) -> None:
        self.running = False

    def view(self, stage: str) -> PoolView:
        pipe = self.rt.pipeline(self.pipeline)
        pool = pipe.pools[stage]
        ex = self.rt.executor
        insts = {n: ex.instance(n) for n in pool.members}
        idle = [n for n in pool.members if n not in pool.active and n not in pool.draining]
        group = f"/{self.pipeline}/{stage}/deps"
        standby = sorted((n for n in idle if insts[n].state == "empty"),
                         key=lambda n: (group not in insts[n].cached_groups, insts[n].node, insts[n].slot))
        return PoolView(
            stage, self.per_replica[stage], list(pool.active),
            ready=[n for n in idle if insts[n].state == "ready"],
            preloading=[n for n in idle if insts[n].state == "preloading"],
            standby=standby,
            nodes={n: i.node for n, i in insts.items()},
        )

    def _tick(self) -> None:
        if not self.running:
            return
        pipe = self.rt.pipeline(self.pipeline)
        arrivals = pipe.submitted - self.seen
        self.seen = pipe.submitted
        now = self.rt.loop.now
        for s in self.stages:
            v = self.view(s)
            est = self.ctl.observe(s, arrivals, now, v.capacity)
            self.estimates.append((now, s, est.ewma_qps, est.utilization))
            for a in self.ctl.decide(est, v, now):
                self.apply(a)
        self.rt.loop.call_later(self.tick_us, self._tick)

    def apply(self, action: ResizeAction) -> None:
        apply_action(self.rt, self.pipeline, action, allow_cold=not self.ctl.preloading)
        self.ctl.record(action, len(self.rt.pipeline(self.pipeline).pools[action.component].active))


def apply_action(rt, pipeline: str, action: ResizeAction, allow_cold: bool = False) -> None:
    """Carry out one action against a runtime; raises BadTransition if the state forbids it."""
    inst = rt.executor.instance(action.instance)
    stage = action.component
    model = rt.pipeline(pipeline).spec.stage(stage).model_id
    if action.kind == "Preload":
        if inst.state != "empty":
            raise BadTransition(f"preload of {inst.name} in state {inst.state}")
        rt.executor.load_model(inst, model, preload=True)
        deps = rt.pipeline(pipeline).spec.stage(stage).deps
        if deps:
            inst.cached_groups.add(f"/{pipeline}/{stage}/deps")
    elif action.kind == "Activate":
        rt.activate(pipeline, stage, action.instance, allow_cold=allow_cold)
    elif action.kind == "Deactivate":
        rt.deactivate(pipeline, stage, action.instance)
    else:
        raise ValueError(action.kind)
