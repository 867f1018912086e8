"""Profile-driven simulated accelerators.

A node owns one GPU that is split into MIG-style instances according to a
layout (a multiset of instance sizes summing to the GPU's memory). Each
instance is a serial resource: it runs one batch at a time for a duration
taken from the model's latency profile at that instance size.
"""
from __future__ import annotations

import bisect
import csv
import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .errors import (
    BadLayout,
    BadRange,
    BadTransition,
    ColdInstance,
    NodeBusy,
    NoProfile,
    OutOfMemory,
)

INSTANCE_SIZES = (6, 12, 24)
DEFAULT_GPU_GB = 24
DEFAULT_LOAD_DELAY_MS = 3000.0

PROFILE_COLUMNS = ["model_id", "instance_size_gb", "batch_size", "latency_ms", "throughput_qps", "memory_gb"]


@dataclass(frozen=True)
class ProfileEntry:
    size: int
    batch: int
    latency_ms: float
    throughput_qps: float
    memory_gb: float
    # share of the instance's compute units a kernel of this model keeps busy
    compute_fraction: float = 1.0


@dataclass
class ComponentProfile:
    model_id: str
    entries: list[ProfileEntry] = field(default_factory=list)

    def sizes(self) -> list[int]:
        return sorted({e.size for e in self.entries})

    def at(self, size: int) -> list[ProfileEntry]:
        rows = sorted((e for e in self.entries if e.size == size), key=lambda e: e.batch)
        if not rows:
            raise NoProfile(f"{self.model_id} has no profile at {size} GB")
        return rows

    def usable(self, size: int, max_batch: int | None = None) -> list[ProfileEntry]:
        try:
            rows = self.at(size)
        except NoProfile:
            return []
        return [e for e in rows if e.memory_gb <= size and (max_batch is None or e.batch <= max_batch)]

    def operating_point(self, size: int, max_batch: int | None = None) -> ProfileEntry | None:
        """Peak-throughput usable entry, smallest batch on ties."""
        rows = self.usable(size, max_batch)
        if not rows:
            return None
        return max(rows, key=lambda e: (e.throughput_qps, -e.batch))

    def memory(self, size: int, max_batch: int | None = None) -> float:
        op = self.operating_point(size, max_batch)
        if op is None:
            rows = self.at(size)
            return min(e.memory_gb for e in rows)
        return op.memory_gb

    def compute_fraction(self, size: int, batch: int) -> float:
        rows = self.at(size)
        i = bisect.bisect_right([e.batch for e in rows], batch) - 1
        return rows[max(i, 0)].compute_fraction


def interpolate(points: list[tuple[float, float]], x: float) -> float:
    """Piecewise-linear through sorted (x, y) knots, extended linearly past either end."""
    if not points:
        raise ValueError("no points")
    if len(points) == 1:
        x0, y0 = points[0]
        # a single knot carries no batching information; treat cost as per-item
        return y0 * x / x0 if x > x0 else y0
    xs = [p[0] for p in points]
    i = bisect.bisect_left(xs, x)
    if i < len(xs) and xs[i] == x:
        return points[i][1]
    if i == 0:
        (x0, y0), (x1, y1) = points[0], points[1]
    elif i >= len(xs):
        (x0, y0), (x1, y1) = points[-2], points[-1]
    else:
        (x0, y0), (x1, y1) = points[i - 1], points[i]
    return y0 + (x - x0) * (y1 - y0) / (x1 - x0)


def latency_model(profile: ComponentProfile, size: int, batch_size: int) -> float:
    """Milliseconds to run one batch of ``batch_size`` on an instance of ``size`` GB."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rows = profile.at(size)
    return interpolate([(e.batch, e.latency_ms) for e in rows], batch_size)


def read_profiles(path) -> dict[str, ComponentProfile]:
    profiles: dict[str, ComponentProfile] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            p = profiles.setdefault(row["model_id"], ComponentProfile(row["model_id"]))
            p.entries.append(
                ProfileEntry(
                    size=int(row["instance_size_gb"]),
                    batch=int(row["batch_size"]),
                    latency_ms=float(row["latency_ms"]),
                    throughput_qps=float(row["throughput_qps"]),
                    memory_gb=float(row["memory_gb"]),
                    compute_fraction=float(row.get("compute_fraction") or 1.0),
                )
            )
    for p in profiles.values():
        for e in p.entries:
            if e.latency_ms <= 0 or e.throughput_qps <= 0:
                raise ValueError(f"non-positive latency/throughput in profile of {p.model_id}")
    return profiles


def write_profiles(profiles: dict[str, ComponentProfile], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PROFILE_COLUMNS + ["compute_fraction"])
        for mid in sorted(profiles):
            for e in sorted(profiles[mid].entries, key=lambda e: (e.size, e.batch)):
                w.writerow([mid, e.size, e.batch, f"{e.latency_ms:.4f}", f"{e.throughput_qps:.4f}",
                            f"{e.memory_gb:g}", f"{e.compute_fraction:g}"])


def profile_from_curve(model_id: str, curves: dict[int, dict], batches: Iterable[int]) -> ComponentProfile:
    """Build a profile from per-size latency curves.

    ``curves[size]`` holds ``base_ms``, ``per_item_ms``, ``knee`` (batch past
    which latency grows proportionally, i.e. throughput stops improving),
    ``memory_gb`` and optionally ``compute_fraction``.
    """
    entries = []
    for size, c in sorted(curves.items()):
        knee = c.get("knee", 1 << 30)
        for b in batches:
            lat = c["base_ms"] + c["per_item_ms"] * min(b, knee)
            if b > knee:
                lat *= b / knee
            entries.append(ProfileEntry(size, b, round(lat, 4), round(1000.0 * b / lat, 4),
                                        c["memory_gb"], c.get("compute_fraction", 1.0)))
    return ComponentProfile(model_id, entries)


# --------------------------------------------------------------------------
# simulated hardware

INSTANCE_STATES = ("empty", "preloading", "ready", "active", "draining")
_TRANSITIONS = {
    "empty": {"preloading", "active"},
    "preloading": {"ready", "empty"},
    "ready": {"active", "empty"},
    "active": {"draining"},
    "draining": {"empty", "active"},
}


@dataclass
class BusyInterval:
    start: int
    end: int
    model: str
    batch: int
    weight: float = 1.0


class AcceleratorInstance:
    def __init__(self, node: int, slot: int, size: int):
        self.node = node
        self.slot = slot
        self.size = size
        self.name = f"n{node}.i{slot}"
        self.loaded: dict[str, float] = {}  # model -> memory GB, once load completes
        self.loading: dict[str, int] = {}  # model -> completion time
        self.cached_groups: set[str] = set()
        self.state = "empty"
        self.busy_until = 0
        self.busy: list[BusyInterval] = []
        self.cold_starts = 0

    @property
    def key(self) -> tuple[int, int]:
        return (self.node, self.slot)

    def __repr__(self) -> str:
        return f"<{self.name} {self.size}GB {self.state} {sorted(self.loaded)}>"

    def memory_in_use(self) -> float:
        return sum(self.loaded.values())

    def set_state(self, new: str) -> None:
        if new not in _TRANSITIONS[self.state]:
            raise BadTransition(f"{self.name}: {self.state} -> {new}")
        self.state = new


@dataclass(frozen=True)
class MIGLayout:
    sizes: tuple[int, ...]

    def validate(self, gpu_gb: int = DEFAULT_GPU_GB, allowed=INSTANCE_SIZES) -> None:
        if not self.sizes or any(s not in allowed for s in self.sizes) or sum(self.sizes) != gpu_gb:
            raise BadLayout(f"{list(self.sizes)} is not a valid layout of a {gpu_gb} GB GPU")


@dataclass
class SimNode:
    node_id: int
    gpu_gb: int = DEFAULT_GPU_GB
    layout: MIGLayout | None = None
    instances: list[AcceleratorInstance] = field(default_factory=list)


class SimExecutor:
    """Deterministic simulated accelerator cluster driven by an :class:`EventLoop`."""

    def __init__(
        self,
        loop,
        profiles: dict[str, ComponentProfile],
        load_delay_ms: dict[str, float] | float = DEFAULT_LOAD_DELAY_MS,
        jitter: float = 0.0,
        seed: int = 0,
        strict_cold: bool = False,
    ):
        self.loop = loop
        self.profiles = profiles
        self.load_delay_ms = load_delay_ms
        self.jitter = jitter
        self.rng = random.Random(seed)
        self.strict_cold = strict_cold
        self.nodes: dict[int, SimNode] = {}
        self.events: list[tuple] = []  # (ts, kind, instance, model)

    # -- cluster shape
    def add_node(self, node_id: int, gpu_gb: int = DEFAULT_GPU_GB) -> SimNode:
        node = SimNode(node_id, gpu_gb)
        self.nodes[node_id] = node
        return node

    def partition_node(self, node_id: int, layout) -> list[AcceleratorInstance]:
        node = self.nodes.get(node_id) or self.add_node(node_id)
        layout = layout if isinstance(layout, MIGLayout) else MIGLayout(tuple(layout))
        layout.validate(node.gpu_gb)
        if any(i.state != "empty" or i.busy_until > self.loop.now or i.loading for i in node.instances):
            raise NodeBusy(f"node {node_id} has live instances")
        node.layout = layout
        node.instances = [AcceleratorInstance(node_id, k, size) for k, size in enumerate(layout.sizes)]
        return node.instances

    def instances(self) -> list[AcceleratorInstance]:
        return [i for n in sorted(self.nodes) for i in self.nodes[n].instances]

    def instance(self, name: str) -> AcceleratorInstance:
        for i in self.instances():
            if i.name == name:
                return i
        raise KeyError(name)

    # -- models
    def load_delay_us(self, model: str) -> int:
        d = self.load_delay_ms
        ms = d.get(model, DEFAULT_LOAD_DELAY_MS) if isinstance(d, dict) else d
        return int(round(ms * 1000))

    def model_memory(self, model: str, size: int) -> float:
        try:
            profile = self.profiles[model]
        except KeyError:
            raise NoProfile(model) from None
        return profile.memory(size)

    def load_model(self, inst: AcceleratorInstance, model: str, preload: bool = False,
                   on_ready: Callable | None = None) -> int:
        """Start loading ``model``; returns the simulated completion time."""
        if model in inst.loaded:
            return self.loop.now
        if model in inst.loading:
            return inst.loading[model]
        need = self.model_memory(model, inst.size)
        committed = inst.memory_in_use() + sum(self.model_memory(m, inst.size) for m in inst.loading)
        if committed + need > inst.size + 1e-9:
            raise OutOfMemory(f"{model} needs {need} GB, {inst.name} has {inst.size - committed:g} GB free")
        if preload and inst.state == "empty":
            inst.set_state("preloading")
        done = self.loop.now + self.load_delay_us(model)
        inst.loading[model] = done
        self.events.append((self.loop.now, "load_start", inst.name, model))

        def finish():
            inst.loading.pop(model, None)
            inst.loaded[model] = need
            self.events.append((self.loop.now, "load_done", inst.name, model))
            if inst.state == "preloading" and not inst.loading:
                inst.set_state("ready")
            if on_ready is not None:
                on_ready()

        self.loop.call_at(done, finish)
        return done

    def load_now(self, inst: AcceleratorInstance, model: str) -> None:
        """Deployment-time load that precedes the run (no simulated delay)."""
        need = self.model_memory(model, inst.size)
        if inst.memory_in_use() + need > inst.size + 1e-9:
            raise OutOfMemory(f"{model} does not fit on {inst.name}")
        inst.loaded[model] = need

    def unload(self, inst: AcceleratorInstance, model: str | None = None) -> None:
        if model is None:
            inst.loaded.clear()
            inst.cached_groups.clear()
        else:
            inst.loaded.pop(model, None)

    # -- execution
    def batch_latency_us(self, inst: AcceleratorInstance, model: str, n: int) -> int:
        ms = latency_model(self.profiles[model], inst.size, n)
        if self.jitter:
            ms *= self.rng.uniform(1 - self.jitter, 1 + self.jitter)
        return max(1, int(round(ms * 1000)))

    def execute_batch(self, inst: AcceleratorInstance, model: str, n: int,
                      on_done: Callable[[int, int], None]) -> tuple[int, int]:
        """Run a batch of ``n`` items; ``on_done(start, end)`` fires at completion.

        A model that is not resident is loaded first (a cold start) unless the
        executor is strict, in which case :class:`ColdInstance` is raised.
        """
        start = max(self.loop.now, inst.busy_until)
        if model not in inst.loaded:
            if self.strict_cold and model not in inst.loading:
                raise ColdInstance(f"{model} is not loaded on {inst.name}")
            if model not in inst.loading:
                inst.cold_starts += 1
                self.events.append((self.loop.now, "cold_start", inst.name, model))
            start = max(start, self.load_model(inst, model))
        end = start + self.batch_latency_us(inst, model, n)
        weight = self.profiles[model].compute_fraction(inst.size, n)
        inst.busy.append(BusyInterval(start, end, model, n, weight))
        inst.busy_until = end
        self.loop.call_at(end, on_done, start, end)
        return start, end

    # -- utilization
    def gract(self, inst: AcceleratorInstance, start: int, end: int, weighted: bool = True) -> float:
        return gract(inst.busy, start, end, weighted)

    def node_gract(self, node_id: int, start: int, end: int, weighted: bool = True) -> float:
        node = self.nodes[node_id]
        return sum(i.size / node.gpu_gb * gract(i.busy, start, end, weighted) for i in node.instances)

    def gract_rows(self, start: int, end: int, window_us: int, weighted: bool = True) -> list[tuple]:
        """(node, instance, window_start_us, gract) rows for a heatmap."""
        if window_us <= 0 or end <= start:
            raise BadRange("empty window")
        rows = []
        for inst in self.instances():
            t = start
            while t < end:
                w_end = min(t + window_us, end)
                rows.append((inst.node, inst.name, t, gract(inst.busy, t, w_end, weighted)))
                t = w_end
        return rows


def gract(intervals: list[BusyInterval], start: int, end: int, weighted: bool = True) -> float:
    """Fraction of [start, end) covered by busy intervals, optionally scaled by compute share."""
    if end <= start:
        raise BadRange(f"empty window [{start}, {end})")
    total = 0.0
    for iv in intervals:
        overlap = min(iv.end, end) - max(iv.start, start)
        if overlap > 0:
            total += overlap * (iv.weight if weighted else 1.0)
    return min(1.0, total / (end - start))


def busy_by_model(inst: AcceleratorInstance) -> dict[str, int]:
    out: dict[str, int] = defaultdict(int)
    for iv in inst.busy:
        out[iv.model] += iv.end - iv.start
    return dict(out)
