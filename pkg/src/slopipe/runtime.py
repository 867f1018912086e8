"""Pipeline execution over component pools.

A query enters at the ingress, which fixes a routing tag (the instance that
will serve it) for every stage before any work starts. Each stage keeps one
pending queue per (pipeline, stage, instance). An instance that goes idle
drains up to ``max_batch`` of the oldest queued items as one batch; it never
waits for a batch to fill. Results are handed to each successor stage's
tagged instance through routed trigger puts on the successor's KVS pool,
coalesced into one send per destination node. A stage with several
upstream inputs holds partial inputs in a join buffer until the query's
matched set is complete.

The ingress balances by power-of-two choices over the queue depth each
instance last published. Instances publish whenever their dispatcher runs;
a dispatcher blocked in a model load publishes nothing, so the ingress keeps
routing to it on the strength of its last (short) queue.
"""
from __future__ import annotations

import csv
import graphlib
import json
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .errors import (
    AlreadyRegistered,
    BadTransition,
    DrainTimeout,
    DuplicateInput,
    IncastTimeout,
    NoSuchPipeline,
    NotADag,
    NoWorker,
    Unschedulable,
)
from .executor import AcceleratorInstance, SimExecutor
from .kvs import KVStore, TriggerEvent
from .planner import Placement

INGRESS_NODE = -1
EXEC_LOG_COLUMNS = ["query_id", "stage", "instance", "enqueue_us", "dispatch_us", "complete_us", "emit_us", "batch_size"]


# --------------------------------------------------------------------------
# specs


@dataclass
class StageSpec:
    stage_id: str
    model_id: str
    max_batch: int = 1
    incast_inputs: list[str] = field(default_factory=list)
    deps: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.max_batch < 1:
            raise ValueError(f"stage {self.stage_id}: max_batch must be >= 1")


@dataclass
class PipelineSpec:
    """A DAG of stages.

    ``ingress`` may name a stage or a virtual source that is not a stage;
    in the latter case its out-edges name the entry stages.
    """

    name: str
    stages: list[StageSpec]
    edges: list[tuple[str, str]]
    ingress: str
    egress: str

    def __post_init__(self):
        self.edges = [tuple(e) for e in self.edges]
        self._by_id = {s.stage_id: s for s in self.stages}

    def stage(self, stage_id: str) -> StageSpec:
        return self._by_id[stage_id]

    @property
    def stage_ids(self) -> list[str]:
        return [s.stage_id for s in self.stages]

    def successors(self, node: str) -> list[str]:
        return [b for a, b in self.edges if a == node]

    def predecessors(self, node: str) -> list[str]:
        return [a for a, b in self.edges if b == node]

    def entry_stages(self) -> list[str]:
        if self.ingress in self._by_id:
            return [self.ingress]
        return self.successors(self.ingress)

    def order(self) -> list[str]:
        """Stages in a deterministic topological order."""
        ts = graphlib.TopologicalSorter({s: sorted(self.predecessors(s)) for s in self.stage_ids})
        try:
            ts.prepare()
        except graphlib.CycleError as e:
            raise NotADag(f"{self.name}: cycle through {e.args[1]}") from None
        out = []
        while ts.is_active():
            ready = sorted(ts.get_ready())
            out.extend(r for r in ready if r in self._by_id)
            ts.done(*ready)
        return out

    def validate(self) -> None:
        if "/" in self.name or not self.name:
            raise ValueError(f"bad pipeline name {self.name!r}")
        if len(self._by_id) != len(self.stages):
            raise NotADag(f"{self.name}: duplicate stage ids")
        nodes = set(self._by_id) | {self.ingress}
        for a, b in self.edges:
            if a not in nodes or b not in nodes:
                raise NotADag(f"{self.name}: edge {a}->{b} names an unknown stage")
        self.order()
        if self.predecessors(self.ingress):
            raise NotADag(f"{self.name}: ingress {self.ingress} has in-edges")
        if self.egress not in self._by_id:
            raise NotADag(f"{self.name}: egress {self.egress} is not a stage")
        if self.successors(self.egress):
            raise NotADag(f"{self.name}: egress {self.egress} has out-edges")
        seen, todo = set(), [self.ingress]
        while todo:
            n = todo.pop()
            if n not in seen:
                seen.add(n)
                todo.extend(self.successors(n))
        missing = sorted(set(self._by_id) - seen)
        if missing:
            raise NotADag(f"{self.name}: unreachable from ingress: {missing}")
        for s in self.stages:
            preds = sorted(self.predecessors(s.stage_id))
            if s.stage_id == self.ingress:
                continue
            if s.incast_inputs and sorted(s.incast_inputs) != preds:
                raise NotADag(f"{self.name}: stage {s.stage_id} incast {s.incast_inputs} != in-edges {preds}")

    def inputs_of(self, stage_id: str) -> list[str]:
        s = self._by_id[stage_id]
        if stage_id == self.ingress:
            return []
        return list(s.incast_inputs) or self.predecessors(stage_id)

    @classmethod
    def from_json(cls, doc: dict) -> "PipelineSpec":
        stages = [
            StageSpec(s["id"], s["model"], int(s.get("max_batch", 1)), list(s.get("incast", [])), list(s.get("deps", [])))
            for s in doc["stages"]
        ]
        return cls(doc["name"], stages, [tuple(e) for e in doc["edges"]], doc["ingress"], doc["egress"])

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "stages": [{"id": s.stage_id, "model": s.model_id, "max_batch": s.max_batch,
                        "incast": list(s.incast_inputs), "deps": list(s.deps)} for s in self.stages],
            "edges": [list(e) for e in self.edges],
            "ingress": self.ingress,
            "egress": self.egress,
        }

    @classmethod
    def load(cls, path) -> "PipelineSpec":
        with open(path) as f:
            return cls.from_json(json.load(f))


# --------------------------------------------------------------------------
# records


@dataclass
class StageTimes:
    instance: str = ""
    enqueue: int | None = None
    dispatch: int | None = None
    complete: int | None = None
    emit: int | None = None
    batch_size: int = 0


@dataclass
class QueryRecord:
    query_id: int
    pipeline: str
    payload: object
    routing_tags: dict[str, str]
    ingress_ts: int
    egress_ts: int | None = None
    stage_timestamps: dict[str, StageTimes] = field(default_factory=dict)
    status: str = "in_flight"  # in_flight | done | failed
    result: object = None
    error: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def latency_us(self) -> int | None:
        return None if self.egress_ts is None else self.egress_ts - self.ingress_ts

    def path(self, order: list[str]) -> str:
        return ";".join(f"{s}:{self.stage_timestamps[s].instance}" for s in order if s in self.stage_timestamps)


@dataclass
class Batch:
    pipeline: str
    stage_id: str
    instance: str
    members: list[int]
    formed_ts: int
    payloads: list = field(default_factory=list, repr=False)


@dataclass
class Send:
    ts: int
    pipeline: str
    from_stage: str
    src_node: int
    dst_node: int
    items: int


@dataclass
class StagePool:
    """Members of one (pipeline, stage) pool, in index order."""

    members: list[str] = field(default_factory=list)
    active: list[str] = field(default_factory=list)
    draining: set[str] = field(default_factory=set)

    def index(self, name: str) -> int:
        return self.members.index(name)


class Pipeline:
    def __init__(self, spec: PipelineSpec):
        self.spec = spec
        self.name = spec.name
        self.order = spec.order()
        self.pools: dict[str, StagePool] = {s: StagePool() for s in spec.stage_ids}
        self.closed = False
        self.submitted = 0
        self.completed = 0
        self.failed = 0
        self.records: dict[int, QueryRecord] = {}

    @property
    def in_flight(self) -> int:
        return self.submitted - self.completed - self.failed

    def prefix(self, stage: str) -> str:
        return f"/{self.name}/{stage}"


# --------------------------------------------------------------------------
# runtime


def passthrough(inputs: list) -> list:
    out = []
    for x in inputs:
        if isinstance(x, tuple):
            out.append(b"".join(p if isinstance(p, bytes) else bytes(str(p), "utf-8") for p in x))
        else:
            out.append(x)
    return out


class Runtime:
    """Runs pipelines on a :class:`SimExecutor` driven by an event loop."""

    def __init__(
        self,
        loop,
        executor: SimExecutor,
        kvs: KVStore | None = None,
        seed: int = 0,
        local_handoff_us: int = 20,
        remote_handoff_us: int = 200,
        handoff_jitter_us: int = 0,
        incast_timeout_us: int | None = None,
    ):
        self.loop = loop
        self.executor = executor
        self.components: dict[str, Callable[[list], list]] = {}
        self.kvs = kvs if kvs is not None else KVStore(loop=loop, seed=seed)
        self.rng = random.Random(f"tags:{seed}")
        self.jitter_rng = random.Random(f"handoff:{seed}")
        self.local_handoff_us = local_handoff_us
        self.remote_handoff_us = remote_handoff_us
        self.handoff_jitter_us = handoff_jitter_us
        self.incast_timeout_us = incast_timeout_us
        self.pipelines: dict[str, Pipeline] = {}
        self.next_query_id = 1
        # per-instance dispatcher state
        self.queues: dict[tuple[str, str, str], deque] = {}
        self.queues_of: dict[str, list[tuple[str, str, str]]] = {}
        self.busy: set[str] = set()
        self.silent: set[str] = set()  # dispatcher blocked in a model load
        self.wedged: set[str] = set()
        self.published: dict[str, int] = {}
        self.outstanding: dict[str, int] = {}  # stage visits routed here but not yet completed
        self.in_service: dict[str, int] = {}
        # join buffers: (pipeline, stage) -> qid -> {upstream: payload}
        self.joins: dict[tuple[str, str], dict[int, dict[str, object]]] = {}
        self.logs: dict[str, list] = {"batches": [], "sends": [], "tag_violations": [], "failures": []}
        self.on_complete: list[Callable[[QueryRecord], None]] = []

    # ------------------------------------------------------------ components
    def register_component(self, model_id: str, handler: Callable[[list], list] | None = None) -> str:
        if model_id in self.components:
            raise AlreadyRegistered(model_id)
        self.components[model_id] = handler or passthrough
        self.kvs.handlers[model_id] = self._on_trigger
        return model_id

    # ------------------------------------------------------------- pipelines
    def _inst(self, name: str) -> AcceleratorInstance:
        return self.executor.instance(name)

    def _ensure_layouts(self, placement: Placement) -> None:
        for n, layout in sorted(placement.layouts.items()):
            node = self.executor.nodes.get(n)
            if node is None or node.layout is None:
                self.executor.partition_node(n, layout)
            elif tuple(node.layout.sizes) != tuple(layout):
                self.executor.partition_node(n, layout)

    def load_pipeline(self, spec: PipelineSpec, placement: Placement,
                      standby: dict[str, list[str]] | None = None) -> Pipeline:
        """Create one pool per stage from the placement and warm every member.

        ``standby`` names extra instances per stage that join the pool
        inactive; the elasticity controller may preload and activate them.
        """
        spec.validate()
        if spec.name in self.pipelines:
            raise AlreadyRegistered(spec.name)
        self._ensure_layouts(placement)
        pipe = Pipeline(spec)
        by_model: dict[str, list[str]] = {}
        for r in sorted(placement.replicas, key=lambda r: (r.node, r.slot)):
            inst = self.executor.nodes[r.node].instances[r.slot]
            by_model.setdefault(r.model, []).append(inst.name)
        for s in spec.stages:
            if not by_model.get(s.model_id):
                raise Unschedulable(f"{spec.name}: stage {s.stage_id} ({s.model_id}) has no replica")
        for s in spec.stages:
            if s.model_id not in self.components:
                self.register_component(s.model_id)
            pool = pipe.pools[s.stage_id]
            names = by_model[s.model_id]
            for name in names:
                inst = self._inst(name)
                self._warm(inst, s, spec.name)
                pool.members.append(name)
                pool.active.append(name)
            for name in (standby or {}).get(s.stage_id, []):
                if name not in pool.members:
                    pool.members.append(name)
            prefix = pipe.prefix(s.stage_id)
            self.kvs.create_pool(prefix, 1, replicas=len(names), members=[list(names)])
            self.kvs.register_trigger(prefix, s.model_id)
            for name in pool.members:
                self._register_instance(name)
        self.pipelines[spec.name] = pipe
        return pipe

    def _warm(self, inst: AcceleratorInstance, stage: StageSpec, pipeline: str) -> None:
        if stage.model_id not in inst.loaded:
            self.executor.load_now(inst, stage.model_id)
        if stage.deps:
            group = f"/{pipeline}/{stage.stage_id}/deps"
            inst.cached_groups.add(group)
        if inst.state == "empty":
            inst.set_state("active")
        elif inst.state == "ready":
            inst.set_state("active")

    def _register_instance(self, name: str) -> None:
        self.queues_of.setdefault(name, [])
        self.published.setdefault(name, 0)
        self.outstanding.setdefault(name, 0)
        self.in_service.setdefault(name, 0)

    def pipeline(self, name: str) -> Pipeline:
        try:
            return self.pipelines[name]
        except KeyError:
            raise NoSuchPipeline(name) from None

    # ------------------------------------------------------------ membership
    def activate(self, pipeline: str, stage: str, name: str, allow_cold: bool = False) -> None:
        """Add ``name`` to the pool that ingress tags from.

        The instance must be ready (model preloaded) unless ``allow_cold``, in
        which case an empty instance joins and loads on its first batch.
        """
        pipe = self.pipeline(pipeline)
        pool = pipe.pools[stage]
        inst = self._inst(name)
        if name in pool.active:
            raise BadTransition(f"{name} already active in {pipeline}/{stage}")
        if inst.state == "ready" or (inst.state == "empty" and allow_cold):
            inst.set_state("active")
        elif inst.state == "draining":
            inst.set_state("active")
            pool.draining.discard(name)
        elif inst.state != "active":
            raise BadTransition(f"cannot activate {name} in state {inst.state}")
        if name not in pool.members:
            pool.members.append(name)
        pool.active.append(name)
        pool.active.sort(key=pool.index)
        self._register_instance(name)
        self.kvs.add_member(self.kvs.shard_of(pipe.prefix(stage) + "/x"), name)

    def deactivate(self, pipeline: str, stage: str, name: str) -> None:
        """Stop tagging ``name``; it drains queued and in-flight tags, then unloads."""
        pipe = self.pipeline(pipeline)
        pool = pipe.pools[stage]
        if name not in pool.active:
            raise BadTransition(f"{name} is not active in {pipeline}/{stage}")
        pool.active.remove(name)
        pool.draining.add(name)
        inst = self._inst(name)
        if inst.state == "active" and not self._active_elsewhere(name):
            inst.set_state("draining")
        self._maybe_retire(name)

    def _active_elsewhere(self, name: str) -> bool:
        return any(name in pool.active for p in self.pipelines.values() for pool in p.pools.values())

    def _maybe_retire(self, name: str) -> None:
        draining = [(p, s) for p in self.pipelines.values() for s, pool in p.pools.items() if name in pool.draining]
        if not draining or name in self.busy:
            return
        if any(self.queues.get(k) for k in self.queues_of.get(name, [])):
            return
        if self.outstanding.get(name, 0):
            return
        inst = self._inst(name)
        for p, s in draining:
            p.pools[s].draining.discard(name)
            self.kvs.remove_member(self.kvs.shard_of(p.prefix(s) + "/x"), name)
        if inst.state == "draining":
            inst.set_state("empty")
            self.executor.unload(inst)
            self.published[name] = 0

    # --------------------------------------------------------------- ingress
    def _choose(self, pool: StagePool) -> str:
        active = pool.active
        if not active:
            raise NoWorker("empty pool")
        if len(active) == 1:
            return active[0]
        a, b = self.rng.sample(active, 2)
        da, db = self.published[a], self.published[b]
        if da != db:
            return a if da < db else b
        return a if self.rng.random() < 0.5 else b

    def ingress_submit(self, pipeline: str, payload: object = b"", meta: dict | None = None) -> int:
        pipe = self.pipeline(pipeline)
        if pipe.closed:
            raise NoSuchPipeline(f"{pipeline} is draining")
        for s in pipe.order:
            if not pipe.pools[s].active:
                raise NoWorker(f"{pipeline}/{s} has no active instance")
        tags = {s: self._choose(pipe.pools[s]) for s in pipe.order}
        for name in tags.values():
            self.outstanding[name] += 1
        qid = self.next_query_id
        self.next_query_id += 1
        rec = QueryRecord(qid, pipeline, payload, tags, self.loop.now, meta=dict(meta or {}))
        pipe.records[qid] = rec
        pipe.submitted += 1
        spec = pipe.spec
        if spec.ingress in spec.stage_ids:
            self.enqueue(pipe, spec.ingress, qid, payload)
        else:
            self._send(pipe, spec.ingress, INGRESS_NODE, [(qid, s, payload) for s in spec.entry_stages()])
        return qid

    # -------------------------------------------------------------- handoffs
    def _resolve(self, pipe: Pipeline, stage: str, qid: int) -> str:
        """The instance a query's tag designates, rerouted if it left the pool."""
        rec = pipe.records[qid]
        tag = rec.routing_tags[stage]
        pool = pipe.pools[stage]
        if tag in pool.active or tag in pool.draining:
            return tag
        if not pool.active:
            raise NoWorker(f"{pipe.name}/{stage}")
        idx = pool.index(tag) if tag in pool.members else 0
        new = pool.active[idx % len(pool.active)]
        self._moved(pipe, stage, qid, tag, new)
        return new

    def _moved(self, pipe: Pipeline, stage: str, qid: int, old: str, new: str) -> None:
        self.logs["tag_violations"].append((self.loop.now, pipe.name, stage, qid, old, new))
        moved = pipe.records[qid].meta.setdefault("moved", {})
        if moved.get(stage) != new:
            self.outstanding[moved.get(stage, old)] -= 1
            self.outstanding[new] = self.outstanding.get(new, 0) + 1
            moved[stage] = new

    def _send(self, pipe: Pipeline, from_stage: str, src_node: int, items: list[tuple[int, str, object]]) -> None:
        """Coalesce (qid, dst_stage, payload) items into one send per destination node."""
        by_node: dict[int, list] = {}
        for qid, dst, payload in items:
            target = self._resolve(pipe, dst, qid)
            by_node.setdefault(self._inst(target).node, []).append((qid, dst, payload, target))
        for node in sorted(by_node):
            batch = by_node[node]
            delay = self.local_handoff_us if node == src_node else self.remote_handoff_us
            if self.handoff_jitter_us:
                delay += self.jitter_rng.randint(0, self.handoff_jitter_us)
            self.logs["sends"].append(Send(self.loop.now, pipe.name, from_stage, src_node, node, len(batch)))
            self.loop.call_later(delay, self._deliver, pipe.name, from_stage, batch)

    def _deliver(self, pipeline: str, from_stage: str, batch: list) -> None:
        pipe = self.pipelines[pipeline]
        for qid, dst, payload, target in batch:
            if pipe.records[qid].status != "in_flight":
                continue
            key = f"{pipe.prefix(dst)}/{qid}/{from_stage}"
            members = self.kvs.members(self.kvs.shard_of(key), live_only=False)
            if target not in members:
                target = self._resolve(pipe, dst, qid)
            self.kvs.trigger_put_routed(key, payload, target)

    def _on_trigger(self, ev: TriggerEvent) -> None:
        _, pipeline, stage, qid, upstream = ev.key.split("/")
        pipe = self.pipelines[pipeline]
        qid = int(qid)
        rec = pipe.records[qid]
        expected = rec.meta.get("moved", {}).get(stage, rec.routing_tags[stage])
        if ev.node != expected:
            # reissued to another member after a failure
            self._moved(pipe, stage, qid, expected, ev.node)
        self.arrive(pipe, stage, qid, upstream, ev.payload, ev.node)

    def arrive(self, pipe: Pipeline, stage: str, qid: int, upstream: str, payload: object,
               instance: str | None = None) -> None:
        inputs = pipe.spec.inputs_of(stage)
        ready = self.join_matched_sets(pipe, stage, qid, upstream, payload)
        if len(inputs) <= 1:
            self.enqueue(pipe, stage, qid, payload, instance)
            return
        for q in ready:
            parts = self.joins[pipe.name, stage].pop(q)
            self.enqueue(pipe, stage, q, tuple(parts[u] for u in inputs), instance)

    def join_matched_sets(self, pipe: Pipeline, stage: str, qid: int, upstream: str, payload: object) -> list[int]:
        """Buffer one upstream output; return the query ids whose matched set just completed."""
        buf = self.joins.setdefault((pipe.name, stage), {})
        inputs = pipe.spec.inputs_of(stage)
        arrived = pipe.records[qid].meta.setdefault("arrived", {}).setdefault(stage, set())
        if upstream in arrived:
            raise DuplicateInput(f"{pipe.name}/{stage}: query {qid} from {upstream}")
        arrived.add(upstream)
        if len(inputs) <= 1:
            return [qid]
        parts = buf.setdefault(qid, {})
        if not parts and self.incast_timeout_us is not None:
            self.loop.call_later(self.incast_timeout_us, self._join_timeout, pipe.name, stage, qid)
        parts[upstream] = payload
        if len(parts) == len(inputs):
            return [qid]
        return []

    def _join_timeout(self, pipeline: str, stage: str, qid: int) -> None:
        buf = self.joins.get((pipeline, stage), {})
        if qid in buf:
            del buf[qid]
            self.fail(self.pipelines[pipeline], qid, IncastTimeout(f"{pipeline}/{stage}: query {qid} partial"))

    def fail(self, pipe: Pipeline, qid: int, err: Exception) -> None:
        rec = pipe.records[qid]
        if rec.status != "in_flight":
            return
        rec.status = "failed"
        rec.error = f"{type(err).__name__}: {err}"
        for stage in pipe.order:
            t = rec.stage_timestamps.get(stage)
            if t is None or t.complete is None:
                self.outstanding[self.serving(pipe, qid, stage)] -= 1
        pipe.failed += 1
        self.logs["failures"].append((self.loop.now, pipe.name, qid, rec.error))

    # ------------------------------------------------------------ dispatcher
    def serving(self, pipe: Pipeline, qid: int, stage: str) -> str:
        """The instance a query's stage visit is (or will be) routed to."""
        rec = pipe.records[qid]
        return rec.meta.get("moved", {}).get(stage, rec.routing_tags[stage])

    def enqueue(self, pipe: Pipeline, stage: str, qid: int, payload: object, instance: str | None = None) -> None:
        name = instance or self._resolve(pipe, stage, qid)
        rec = pipe.records[qid]
        rec.stage_timestamps[stage] = StageTimes(instance=name, enqueue=self.loop.now)
        key = (pipe.name, stage, name)
        q = self.queues.get(key)
        if q is None:
            q = self.queues[key] = deque()
            self.queues_of.setdefault(name, []).append(key)
        q.append((qid, self.loop.now, payload))
        self._publish(name)
        self._dispatch(name)

    def depth(self, name: str) -> int:
        return sum(len(self.queues[k]) for k in self.queues_of.get(name, [])) + self.in_service.get(name, 0)

    def _publish(self, name: str) -> None:
        if name not in self.silent:
            self.published[name] = self.depth(name)

    def form_batch(self, name: str) -> Batch | None:
        """Drain up to max_batch of the oldest pending items at an idle instance."""
        best = None
        for key in self.queues_of.get(name, []):
            q = self.queues[key]
            if q and (best is None or (q[0][1], q[0][0]) < best[0]):
                best = ((q[0][1], q[0][0]), key)
        if best is None:
            return None
        pipeline, stage, _ = best[1]
        q = self.queues[best[1]]
        cap = self.pipelines[pipeline].spec.stage(stage).max_batch
        members = [q.popleft() for _ in range(min(len(q), cap))]
        batch = Batch(pipeline, stage, name, [m[0] for m in members], self.loop.now, [m[2] for m in members])
        return batch

    def _dispatch(self, name: str) -> None:
        if name in self.busy or name in self.wedged:
            return
        batch = self.form_batch(name)
        if batch is None:
            return
        pipe = self.pipelines[batch.pipeline]
        model = pipe.spec.stage(batch.stage_id).model_id
        inst = self._inst(name)
        self.busy.add(name)
        self.in_service[name] = len(batch.members)
        for qid in batch.members:
            pipe.records[qid].stage_timestamps[batch.stage_id].dispatch = self.loop.now
        self.logs["batches"].append(batch)
        self._publish(name)
        if model not in inst.loaded:
            self.silent.add(name)
        self.executor.execute_batch(inst, model, len(batch.members),
                                    lambda start, end: self._done(batch, model, start, end))

    def _done(self, batch: Batch, model: str, start: int, end: int) -> None:
        name = batch.instance
        pipe = self.pipelines[batch.pipeline]
        self.busy.discard(name)
        self.silent.discard(name)
        self.in_service[name] = 0
        results = self.components[model](list(batch.payloads))
        if len(results) != len(batch.members):
            raise RuntimeError(f"component {model} returned {len(results)} results for {len(batch.members)} inputs")
        for qid in batch.members:
            t = pipe.records[qid].stage_timestamps[batch.stage_id]
            t.complete = end
            t.batch_size = len(batch.members)
            self.outstanding[name] -= 1
        self.emit_results(pipe, batch, results)
        self._publish(name)
        self._dispatch(name)
        for s, pool in pipe.pools.items():
            for d in list(pool.draining):
                self._maybe_retire(d)

    def emit_results(self, pipe: Pipeline, batch: Batch, results: list) -> None:
        spec = pipe.spec
        now = self.loop.now
        succ = spec.successors(batch.stage_id)
        items = []
        for qid, res in zip(batch.members, results):
            rec = pipe.records[qid]
            rec.stage_timestamps[batch.stage_id].emit = now
            if rec.status != "in_flight":
                continue
            if batch.stage_id == spec.egress:
                rec.egress_ts = now
                rec.result = res
                rec.status = "done"
                pipe.completed += 1
                for fn in self.on_complete:
                    fn(rec)
                continue
            items.extend((qid, s, res) for s in succ)
        if items:
            self._send(pipe, batch.stage_id, self._inst(batch.instance).node, items)

    # -------------------------------------------------------------- control
    def wedge(self, name: str) -> None:
        """Test hook: the instance stops dispatching."""
        self.wedged.add(name)

    def unwedge(self, name: str) -> None:
        self.wedged.discard(name)
        self._dispatch(name)

    def drain(self, pipeline: str, timeout_us: int = 60_000_000) -> int:
        pipe = self.pipeline(pipeline)
        pipe.closed = True
        n = pipe.in_flight
        deadline = self.loop.now + timeout_us
        self.loop.run(until=deadline, stop=lambda: pipe.in_flight == 0)
        if pipe.in_flight:
            raise DrainTimeout(pipe.in_flight)
        return n

    def reopen(self, pipeline: str) -> None:
        self.pipeline(pipeline).closed = False

    def conservation(self, pipeline: str) -> dict[str, int]:
        p = self.pipeline(pipeline)
        return {"submitted": p.submitted, "completed": p.completed, "in_flight": p.in_flight, "failed": p.failed}

    # ------------------------------------------------------------------ logs
    def exec_rows(self) -> list[tuple]:
        rows = []
        for pipe in self.pipelines.values():
            for qid in sorted(pipe.records):
                rec = pipe.records[qid]
                for s in pipe.order:
                    t = rec.stage_timestamps.get(s)
                    if t is None or t.dispatch is None:
                        continue
                    rows.append((qid, s, t.instance, t.enqueue, t.dispatch, t.complete, t.emit, t.batch_size))
        rows.sort(key=lambda r: (r[0], r[4], r[1]))
        return rows

    def write_exec_log(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(EXEC_LOG_COLUMNS)
            for row in self.exec_rows():
                w.writerow(["" if v is None else v for v in row])
