"""Static placement of model replicas onto MIG-partitioned GPUs.

Every node picks exactly one layout; every slot (MIG instance) of the
chosen layout hosts either nothing or a group of models whose memory fits
the slot. A slot hosting a single model contributes that model's profiled
throughput ``T[m, c]``. A slot hosting several models time-shares its
compute: each query passes through every resident model, so each member
is credited ``1 / sum(1 / T[m, c])``. A component's throughput is the sum
of credits over all slots hosting its model.

The objective is lexicographic max-min over the component throughput
vector: maximize the smallest, then the second smallest, and so on.

Throughputs are quantized to multiples of 1/1024 qps so that every sum is
exact in binary floating point; comparisons are therefore exact and
independent of summation order.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import Infeasible
from .executor import DEFAULT_GPU_GB, INSTANCE_SIZES, ComponentProfile

QUANTUM = 1024.0

DEFAULT_LAYOUTS = ((24,), (12, 12), (12, 6, 6), (6, 6, 6, 6))


def quantize(x: float) -> float:
    return round(x * QUANTUM) / QUANTUM


@dataclass
class PlacementProblem:
    nodes: tuple[int, ...]  # GPU memory per node
    layouts: tuple[tuple[int, ...], ...]
    profiles: dict[str, ComponentProfile]
    components: dict[str, str]  # component id -> model id
    max_batch: dict[str, int] = field(default_factory=dict)  # per model cap
    colocate: bool = True

    @classmethod
    def uniform(cls, n_nodes: int, components, profiles, layouts=DEFAULT_LAYOUTS,
                gpu_gb: int = DEFAULT_GPU_GB, **kw) -> "PlacementProblem":
        layouts = tuple(tuple(sorted(l, reverse=True)) for l in layouts)
        return cls(tuple([gpu_gb] * n_nodes), layouts, profiles, dict(components), **kw)

    @property
    def models(self) -> list[str]:
        return sorted(set(self.components.values()))

    def layouts_for(self, gpu_gb: int) -> list[tuple[int, ...]]:
        return [tuple(l) for l in self.layouts if sum(l) == gpu_gb]

    def check(self) -> None:
        if not self.layouts:
            raise Infeasible("no layouts allowed")
        for comp, m in self.components.items():
            if m not in self.profiles:
                raise Infeasible(f"component {comp}: no profile for model {m}")
            if not any(self.profiles[m].operating_point(c, self.max_batch.get(m)) for c in INSTANCE_SIZES):
                raise Infeasible(f"model {m} fits no instance size")


@dataclass(frozen=True)
class Replica:
    model: str
    node: int
    slot: int
    size: int


@dataclass
class Placement:
    layouts: dict[int, tuple[int, ...]]  # node -> chosen layout (y)
    replicas: list[Replica]  # x, one entry per (model, slot)
    throughput: dict[str, float] = field(default_factory=dict)

    def slot_groups(self) -> dict[tuple[int, int], list[str]]:
        groups: dict[tuple[int, int], list[str]] = {}
        for r in self.replicas:
            groups.setdefault((r.node, r.slot), []).append(r.model)
        return {k: sorted(v) for k, v in sorted(groups.items())}

    def sorted_vector(self) -> tuple[float, ...]:
        return tuple(sorted(self.throughput.values()))

    def to_json(self) -> dict:
        return {
            "y": {str(n): list(l) for n, l in sorted(self.layouts.items())},
            "x": [{"model": r.model, "node": r.node, "slot": r.slot, "size": r.size}
                  for r in sorted(self.replicas, key=lambda r: (r.node, r.slot, r.model))],
            "throughput": {k: self.throughput[k] for k in sorted(self.throughput)},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Placement":
        return cls(
            layouts={int(n): tuple(l) for n, l in doc["y"].items()},
            replicas=[Replica(r["model"], int(r["node"]), int(r["slot"]), int(r["size"])) for r in doc["x"]],
            throughput={k: float(v) for k, v in doc.get("throughput", {}).items()},
        )

    def table(self) -> str:
        lines = ["node  layout          slots"]
        groups = self.slot_groups()
        for n in sorted(self.layouts):
            cells = []
            for k, size in enumerate(self.layouts[n]):
                ms = groups.get((n, k), [])
                cells.append(f"{size}G:{'+'.join(ms) if ms else '-'}")
            lines.append(f"{n:<5} {str(list(self.layouts[n])):<15} {'  '.join(cells)}")
        lines.append("")
        lines.append("component  qps")
        for comp in sorted(self.throughput, key=lambda c: (self.throughput[c], c)):
            lines.append(f"{comp:<10} {self.throughput[comp]:.3f}")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# profile tables


def throughput_table(problem: PlacementProblem) -> tuple[dict, dict]:
    """(T, R) keyed by (model, size), restricted to entries that fit the slot."""
    T, R = {}, {}
    for m in problem.models:
        prof = problem.profiles[m]
        for c in INSTANCE_SIZES:
            op = prof.operating_point(c, problem.max_batch.get(m))
            if op is not None:
                T[m, c] = quantize(op.throughput_qps)
                R[m, c] = op.memory_gb
    return T, R


def group_credit(T: dict, group, size: int) -> float:
    if len(group) == 1:
        return T[group[0], size]
    return quantize(1.0 / sum(1.0 / T[m, size] for m in group))


def slot_options(problem: PlacementProblem, size: int, T: dict, R: dict) -> list[tuple[str, ...]]:
    """Model groups that fit a slot of ``size``, smallest groups first."""
    fits = [m for m in problem.models if (m, size) in T]
    max_k = len(fits) if problem.colocate else 1
    out = []
    for k in range(1, max_k + 1):
        for g in itertools.combinations(fits, k):
            if sum(R[m, size] for m in g) <= size + 1e-9:
                out.append(g)
    return out


# --------------------------------------------------------------------------
# evaluation and validation


@dataclass(frozen=True)
class Violation:
    constraint: str  # LayoutViolation | MemoryViolation | SlotViolation | ProfileViolation
    node: int
    model: str | None = None
    detail: str = ""


def validate(placement: Placement, problem: PlacementProblem) -> list[Violation]:
    out: list[Violation] = []
    allowed = {tuple(sorted(l, reverse=True)) for l in problem.layouts}
    for n, gpu in enumerate(problem.nodes):
        lay = placement.layouts.get(n)
        if lay is None:
            out.append(Violation("LayoutViolation", n, None, "no layout chosen"))
        elif tuple(sorted(lay, reverse=True)) not in allowed or sum(lay) != gpu:
            out.append(Violation("LayoutViolation", n, None, f"layout {list(lay)} not allowed"))
    for n in placement.layouts:
        if not 0 <= n < len(problem.nodes):
            out.append(Violation("LayoutViolation", n, None, "unknown node"))
    for (n, k), models in placement.slot_groups().items():
        lay = placement.layouts.get(n)
        if lay is None or k >= len(lay):
            for m in models:
                out.append(Violation("SlotViolation", n, m, f"slot {k} does not exist"))
            continue
        size = lay[k]
        used = 0.0
        for r in (r for r in placement.replicas if r.node == n and r.slot == k):
            if r.size != size:
                out.append(Violation("SlotViolation", n, r.model, f"slot {k} is {size} GB, not {r.size}"))
            prof = problem.profiles.get(r.model)
            op = prof.operating_point(size, problem.max_batch.get(r.model)) if prof else None
            if op is None:
                mem = None
                if prof is not None:
                    try:
                        mem = prof.memory(size)
                    except Exception:
                        mem = None
                out.append(Violation("MemoryViolation", n, r.model,
                                     f"needs {mem if mem is not None else '?'} GB > {size} GB slot"))
                continue
            used += op.memory_gb
        if used > size + 1e-9:
            out.append(Violation("MemoryViolation", n, "+".join(models), f"{used:g} GB > {size} GB slot"))
        if len(models) != len(set(models)):
            out.append(Violation("SlotViolation", n, None, f"duplicate model in slot {k}"))
        if len(models) > 1 and not problem.colocate:
            out.append(Violation("SlotViolation", n, None, f"co-location disabled, slot {k}"))
    return out


def model_throughputs(placement: Placement, problem: PlacementProblem) -> dict[str, float]:
    T, _ = throughput_table(problem)
    out = {m: 0.0 for m in problem.models}
    for (n, k), models in placement.slot_groups().items():
        size = placement.layouts[n][k]
        credit = group_credit(T, tuple(models), size)
        for m in models:
            out[m] = out.get(m, 0.0) + credit
    return out


def evaluate(placement: Placement, problem: PlacementProblem) -> dict[str, float]:
    per_model = model_throughputs(placement, problem)
    return {c: per_model.get(m, 0.0) for c, m in problem.components.items()}


def component_throughput(placement: Placement, component: str, problem: PlacementProblem) -> float:
    violations = validate(placement, problem)
    if violations:
        raise Infeasible("invalid placement", violations)
    return evaluate(placement, problem)[component]


# --------------------------------------------------------------------------
# solver


@dataclass
class _NodeConfig:
    layout: tuple[int, ...]
    groups: tuple[tuple[str, ...], ...]  # one per slot; () is empty
    vec: tuple[float, ...]
    replicas: int


def node_configs(problem: PlacementProblem, gpu_gb: int, T: dict, R: dict) -> list[_NodeConfig]:
    models = problem.models
    idx = {m: i for i, m in enumerate(models)}
    out = []
    for layout in problem.layouts_for(gpu_gb):
        per_size = []
        sizes = sorted(set(layout), reverse=True)
        for size in sizes:
            opts = [()] + slot_options(problem, size, T, R)
            per_size.append(list(itertools.combinations_with_replacement(opts, layout.count(size))))
        for combo in itertools.product(*per_size):
            groups = tuple(g for part in combo for g in part)
            vec = [0.0] * len(models)
            slot_sizes = [s for s in sizes for _ in range(layout.count(s))]
            for g, size in zip(groups, slot_sizes):
                if g:
                    credit = group_credit(T, g, size)
                    for m in g:
                        vec[idx[m]] += credit
            out.append(_NodeConfig(tuple(slot_sizes), groups, tuple(vec), sum(len(g) for g in groups)))
    return out


def _pareto(items: list, vec_of, rep_of) -> list:
    """Keep items whose vector is not dominated; among equal vectors keep the fewest replicas."""
    best: dict[tuple, object] = {}
    for it in items:
        v = vec_of(it)
        cur = best.get(v)
        if cur is None or rep_of(it) < rep_of(cur):
            best[v] = it
    # a dominator has a sum at least as large, so it is always visited first
    ordered = sorted(best.values(), key=lambda it: (-sum(vec_of(it)), rep_of(it)))
    if not ordered:
        return []
    kept: list = []
    kept_vecs = np.empty((len(ordered), len(vec_of(ordered[0]))))
    for it in ordered:
        v = vec_of(it)
        if kept and np.any(np.all(kept_vecs[: len(kept)] >= v, axis=1)):
            continue
        kept_vecs[len(kept)] = v
        kept.append(it)
    return kept


def _lex_key(problem: PlacementProblem, vec) -> tuple[float, ...]:
    per_model = dict(zip(problem.models, vec))
    return tuple(sorted(per_model[m] for m in problem.components.values()))


def _add(a, b) -> tuple[float, ...]:
    return tuple(x + y for x, y in zip(a, b))


def plan(problem: PlacementProblem, beam_width: int = 16) -> Placement:
    """Exact lexicographic max-min placement.

    Dynamic program over nodes whose state set is the Pareto frontier of
    achievable per-model throughput vectors: a dominated partial vector can
    never finish lexicographically ahead of its dominator, since the sorted
    vector is monotone in every coordinate. States are also dropped when
    even their optimistic completion (every remaining node granting each
    model its best single-node credit) sorts below an incumbent found by a
    narrow beam search. Ties on the sorted vector go to fewer replicas.
    """
    problem.check()
    T, R = throughput_table(problem)
    k = len(problem.models)
    configs: dict[int, list[_NodeConfig]] = {}
    for gpu in set(problem.nodes):
        found = node_configs(problem, gpu, T, R)
        if not found:
            raise Infeasible(f"no allowed layout for a {gpu} GB GPU")
        configs[gpu] = _pareto(found, lambda c: c.vec, lambda c: c.replicas)
    best_single = {g: tuple(max(c.vec[i] for c in cs) for i in range(k)) for g, cs in configs.items()}
    # optimistic credit still available after node n
    headroom = [(0.0,) * k] * (len(problem.nodes) + 1)
    for n in range(len(problem.nodes) - 1, -1, -1):
        headroom[n] = _add(headroom[n + 1], best_single[problem.nodes[n]])

    def bound(vec, n_done):
        return _lex_key(problem, _add(vec, headroom[n_done]))

    # incumbent
    beam = [((0.0,) * k, 0, ())]
    for n, gpu in enumerate(problem.nodes):
        cand = {}
        for vec, reps, chain in beam:
            for cfg in configs[gpu]:
                nv = _add(vec, cfg.vec)
                if nv not in cand or reps + cfg.replicas < cand[nv][1]:
                    cand[nv] = (nv, reps + cfg.replicas, chain + (cfg,))
        beam = sorted(cand.values(), key=lambda s: (bound(s[0], n + 1), -s[1]), reverse=True)[:beam_width]
    incumbent = max(_lex_key(problem, s[0]) for s in beam)

    states = [((0.0,) * k, 0, ())]
    for n, gpu in enumerate(problem.nodes):
        nxt = []
        for vec, reps, chain in states:
            for cfg in configs[gpu]:
                nv = _add(vec, cfg.vec)
                if bound(nv, n + 1) < incumbent:
                    continue
                nxt.append((nv, reps + cfg.replicas, chain + (cfg,)))
        states = _pareto(nxt, lambda s: s[0], lambda s: s[1])

    best = max(states, key=lambda s: (_lex_key(problem, s[0]), -s[1]))
    if _lex_key(problem, best[0])[0] <= 0:
        raise Infeasible("some component cannot receive any replica")
    return _materialize(problem, best[2])


def _materialize(problem: PlacementProblem, chain) -> Placement:
    layouts, replicas = {}, []
    for n, cfg in enumerate(chain):
        layouts[n] = cfg.layout
        for slot, (g, size) in enumerate(zip(cfg.groups, cfg.layout)):
            for m in g:
                replicas.append(Replica(m, n, slot, size))
    p = Placement(layouts, replicas)
    p.throughput = evaluate(p, problem)
    return p


def monolithic_baseline(problem: PlacementProblem) -> Placement:
    """Every node gets one full-GPU instance holding one replica of every model."""
    problem.check()
    T, R = throughput_table(problem)
    models = problem.models
    layouts, replicas = {}, []
    for n, gpu in enumerate(problem.nodes):
        missing = [m for m in models if (m, gpu) not in T]
        if missing:
            raise Infeasible(f"models {missing} have no usable profile at {gpu} GB")
        total = sum(R[m, gpu] for m in models)
        if total > gpu + 1e-9:
            raise Infeasible(f"pipeline needs {total:g} GB, node {n} has {gpu} GB")
        layouts[n] = (gpu,)
        replicas.extend(Replica(m, n, 0, gpu) for m in models)
    p = Placement(layouts, replicas)
    # the full-GPU layout is part of the baseline even if not in the allowed list
    p.throughput = evaluate(p, problem)
    return p


# --------------------------------------------------------------------------
# problem I/O


def problem_from_json(doc: dict, profiles: dict[str, ComponentProfile]) -> PlacementProblem:
    gpu = int(doc.get("gpu_gb", DEFAULT_GPU_GB))
    nodes = doc["nodes"]
    nodes = tuple([gpu] * nodes) if isinstance(nodes, int) else tuple(int(x) for x in nodes)
    layouts = tuple(tuple(sorted(l, reverse=True)) for l in doc.get("layouts", DEFAULT_LAYOUTS))
    comps = {c["id"]: c["model"] for c in doc["components"]}
    return PlacementProblem(nodes, layouts, profiles, comps,
                            max_batch={k: int(v) for k, v in doc.get("max_batch", {}).items()},
                            colocate=bool(doc.get("colocate", True)))


def write_placement(placement: Placement, path) -> None:
    with open(path, "w") as fh:
        json.dump(placement.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
