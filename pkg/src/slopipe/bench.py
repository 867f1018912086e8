"""Open-loop load generation and run reports.

Arrival times come from the workload spec and the seed alone; they are
scheduled before the run starts and never consult system state.

Percentiles use the nearest-rank definition: the p-th percentile of n
sorted values is the value at 1-based rank ``ceil(p/100 * n)``. Miss rates
are exact fractions of completed queries whose latency is strictly greater
than the target.
"""
from __future__ import annotations

import csv
import math
import os
import random
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import BadRange, IoError, NoData, NoSuchPipeline

QUERY_COLUMNS = ["query_id", "phase", "arrival_us", "ingress_us", "egress_us", "latency_us"]
CURVE_COLUMNS = ["offered_qps", "p5_ms", "p50_ms", "p95_ms"]
GRACT_COLUMNS = ["node", "instance", "window_start_us", "gract"]
DEFAULT_SLOS_MS = (200, 500)


@dataclass
class Phase:
    rate_qps: float
    count: int | None = None
    duration_s: float | None = None
    arrival: str = "constant"  # constant | poisson

    def __post_init__(self):
        if self.rate_qps <= 0:
            raise ValueError("rate must be positive")
        if (self.count is None) == (self.duration_s is None):
            raise ValueError("a phase needs exactly one of count or duration_s")
        if self.arrival not in ("constant", "poisson"):
            raise ValueError(f"unknown arrival process {self.arrival!r}")


@dataclass
class WorkloadSpec:
    phases: list[Phase]
    seed: int = 0
    pipeline: str = ""

    def __post_init__(self):
        if not self.phases:
            raise ValueError("workload needs at least one phase")

    @classmethod
    def from_json(cls, doc: dict) -> "WorkloadSpec":
        phases = [Phase(float(p["rate_qps"]), p.get("count"), p.get("duration_s"), p.get("arrival", "constant"))
                  for p in doc["phases"]]
        return cls(phases, int(doc.get("seed", 0)), doc.get("pipeline", ""))

    def to_json(self) -> dict:
        out = []
        for p in self.phases:
            d = {"rate_qps": p.rate_qps, "arrival": p.arrival}
            if p.count is not None:
                d["count"] = p.count
            else:
                d["duration_s"] = p.duration_s
            out.append(d)
        return {"phases": out, "seed": self.seed, "pipeline": self.pipeline}


@dataclass(frozen=True)
class Arrival:
    t_us: int
    phase: int


@dataclass
class SLOTarget:
    latency_ms: float
    allowed_miss_rate: float | None = None

    def __post_init__(self):
        if self.latency_ms <= 0:
            raise ValueError("SLO latency must be positive")


def arrivals(spec: WorkloadSpec, start_us: int = 0) -> list[Arrival]:
    out: list[Arrival] = []
    t0 = start_us
    for i, p in enumerate(spec.phases):
        rng = random.Random(f"{spec.seed}:{i}")
        gap = 1e6 / p.rate_qps
        end = None if p.duration_s is None else t0 + p.duration_s * 1e6
        k, t = 0, float(t0)
        while True:
            if p.arrival == "constant":
                t = t0 + k * gap
            elif k:
                t += rng.expovariate(p.rate_qps) * 1e6
            if p.count is not None and k >= p.count:
                break
            if end is not None and t >= end:
                break
            out.append(Arrival(int(round(t)), i))
            k += 1
        if end is not None:
            t0 = int(round(end))
        elif p.arrival == "constant":
            t0 = int(round(t0 + p.count * gap))
        else:
            t0 = int(round(t))  # the next draw already lies past the last arrival
    return out


def phase_windows(spec: WorkloadSpec, arr: list[Arrival]) -> list[tuple[int, int]]:
    """(first, last) arrival time of each phase."""
    out = []
    for i in range(len(spec.phases)):
        ts = [a.t_us for a in arr if a.phase == i]
        out.append((ts[0], ts[-1]) if ts else (0, 0))
    return out


def steady_window(window: tuple[int, int], trim: float = 0.1) -> tuple[int, int]:
    a, b = window
    cut = int((b - a) * trim)
    return a + cut, b - cut


def generate(runtime, spec: WorkloadSpec, payload: bytes = b"q", start_us: int | None = None) -> list[Arrival]:
    """Schedule every submission of ``spec`` on the runtime's loop."""
    if spec.pipeline not in runtime.pipelines:
        raise NoSuchPipeline(spec.pipeline)
    loop = runtime.loop
    arr = arrivals(spec, loop.now if start_us is None else start_us)
    for a in arr:
        loop.call_at(a.t_us, _submit, runtime, spec.pipeline, payload, a)
    return arr


def _submit(runtime, pipeline, payload, a: Arrival) -> None:
    runtime.ingress_submit(pipeline, payload, meta={"arrival_us": a.t_us, "phase": a.phase})


# --------------------------------------------------------------------------
# statistics


def nearest_rank(sorted_values, p: float):
    n = len(sorted_values)
    if n == 0:
        raise NoData("no values")
    rank = max(1, math.ceil(p / 100 * n))
    return sorted_values[rank - 1]


def latency_stats(latencies) -> tuple:
    """(p5, p50, p95, mean) of end-to-end latencies."""
    xs = sorted(latencies)
    if not xs:
        raise NoData("no completed queries")
    return nearest_rank(xs, 5), nearest_rank(xs, 50), nearest_rank(xs, 95), sum(xs) / len(xs)


def slo_miss_rate(latencies_us, target: SLOTarget | float) -> Fraction:
    ms = target.latency_ms if isinstance(target, SLOTarget) else target
    xs = list(latencies_us)
    if not xs:
        raise NoData("no completed queries")
    limit = ms * 1000
    return Fraction(sum(1 for x in xs if x > limit), len(xs))


@dataclass
class Throughput:
    qps: float
    backlog: bool


def in_flight_at(rows, t: int) -> int:
    return sum(1 for r in rows if r.ingress_us <= t and (r.egress_us is None or r.egress_us > t))


def sustained_throughput(rows, window: tuple[int, int], samples: int = 5) -> Throughput:
    """Completions per second inside ``window`` plus a backlog flag.

    Backlog means the in-flight count sampled across the window never
    decreases and ends higher than it started.
    """
    a, b = window
    if b <= a:
        raise BadRange("empty window")
    lo = min(r.ingress_us for r in rows)
    hi = max((r.egress_us for r in rows if r.egress_us is not None), default=lo)
    if a < lo or b > max(hi, max(r.ingress_us for r in rows)):
        raise BadRange(f"window [{a}, {b}] outside run [{lo}, {hi}]")
    done = sum(1 for r in rows if r.egress_us is not None and a <= r.egress_us < b)
    pts = [in_flight_at(rows, a + (b - a) * k // (samples - 1)) for k in range(samples)]
    backlog = all(x <= y for x, y in zip(pts, pts[1:])) and pts[-1] > pts[0]
    return Throughput(done * 1e6 / (b - a), backlog)


# --------------------------------------------------------------------------
# reports


@dataclass
class QueryRow:
    query_id: int
    phase: int
    arrival_us: int
    ingress_us: int
    egress_us: int | None
    path: str

    @property
    def latency_us(self) -> int | None:
        return None if self.egress_us is None else self.egress_us - self.ingress_us


@dataclass
class CurveRow:
    offered_qps: float
    p5_us: int
    p50_us: int
    p95_us: int
    miss: dict[float, Fraction]
    achieved_qps: float


@dataclass
class RunReport:
    rows: list[QueryRow]
    slos: list[SLOTarget] = field(default_factory=lambda: [SLOTarget(ms) for ms in DEFAULT_SLOS_MS])
    curve: list[CurveRow] = field(default_factory=list)
    gract_rows: list[tuple] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def latencies(self, phase: int | None = None) -> list[int]:
        return [r.latency_us for r in self.rows if r.latency_us is not None and (phase is None or r.phase == phase)]

    def stats(self) -> tuple:
        return latency_stats(self.latencies())

    def miss_rates(self) -> dict[float, Fraction]:
        lat = self.latencies()
        return {s.latency_ms: slo_miss_rate(lat, s) for s in self.slos}

    def slo_violations(self) -> list[SLOTarget]:
        rates = self.miss_rates()
        return [s for s in self.slos if s.allowed_miss_rate is not None and rates[s.latency_ms] > Fraction(s.allowed_miss_rate)]

    def snapshot(self) -> dict:
        lat = self.latencies()
        out = {"submitted": len(self.rows), "completed": len(lat)}
        if lat:
            p5, p50, p95, mean = latency_stats(lat)
            out.update(p5_us=p5, p50_us=p50, p95_us=p95, mean_us=mean)
            out["miss_rate"] = {fmt_ms(s.latency_ms): float(r) for s, r in zip(self.slos, self.miss_rates().values())}
        return out


def rows_from_runtime(runtime, pipeline: str) -> list[QueryRow]:
    pipe = runtime.pipeline(pipeline)
    out = []
    for qid in sorted(pipe.records):
        rec = pipe.records[qid]
        out.append(QueryRow(qid, int(rec.meta.get("phase", 0)), int(rec.meta.get("arrival_us", rec.ingress_ts)),
                            rec.ingress_ts, rec.egress_ts, rec.path(pipe.order)))
    return out


def curve_row(rows: list[QueryRow], offered_qps: float, slos, window: tuple[int, int] | None = None,
              all_rows: list[QueryRow] | None = None) -> CurveRow:
    """Latency statistics over ``rows``; achieved rate over ``window`` of the whole run."""
    lat = [r.latency_us for r in rows if r.latency_us is not None]
    p5, p50, p95, _ = latency_stats(lat)
    miss = {s.latency_ms: slo_miss_rate(lat, s) for s in slos}
    all_rows = all_rows or rows
    if window is None:
        window = (min(r.ingress_us for r in rows), max(r.ingress_us for r in rows))
    achieved = sustained_throughput(all_rows, window).qps if window[1] > window[0] else 0.0
    return CurveRow(offered_qps, p5, p50, p95, miss, achieved)


def fmt_ms(ms: float) -> str:
    return f"{ms:g}"


def fmt_us_as_ms(us: int) -> str:
    sign = "-" if us < 0 else ""
    us = abs(int(us))
    return f"{sign}{us // 1000}.{us % 1000:03d}"


def query_columns(slos) -> list[str]:
    return QUERY_COLUMNS + [f"miss_{fmt_ms(s.latency_ms)}ms" for s in slos] + ["path"]


def curve_columns(slos) -> list[str]:
    return CURVE_COLUMNS + [f"miss_rate_{fmt_ms(s.latency_ms)}" for s in slos] + ["achieved_qps"]


def _open(path):
    try:
        return open(path, "w", newline="")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def write_queries(report: RunReport, path) -> None:
    with _open(path) as f:
        w = csv.writer(f)
        w.writerow(query_columns(report.slos))
        for r in report.rows:
            lat = r.latency_us
            misses = ["" if lat is None else int(lat > s.latency_ms * 1000) for s in report.slos]
            w.writerow([r.query_id, r.phase, r.arrival_us, r.ingress_us,
                        "" if r.egress_us is None else r.egress_us, "" if lat is None else lat, *misses, r.path])


def write_curve(report: RunReport, path) -> None:
    with _open(path) as f:
        w = csv.writer(f)
        w.writerow(curve_columns(report.slos))
        for c in report.curve:
            w.writerow([f"{c.offered_qps:g}", fmt_us_as_ms(c.p5_us), fmt_us_as_ms(c.p50_us), fmt_us_as_ms(c.p95_us),
                        *[repr(float(c.miss[s.latency_ms])) for s in report.slos], f"{c.achieved_qps:.6f}"])


def write_gract(rows, path) -> None:
    with _open(path) as f:
        w = csv.writer(f)
        w.writerow(GRACT_COLUMNS)
        for node, inst, t, g in rows:
            w.writerow([node, inst, t, repr(float(g))])


def emit_report(report: RunReport, outdir, svg: bool = False) -> list[str]:
    try:
        os.makedirs(outdir, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {outdir}: {e}") from e
    paths = [os.path.join(outdir, "queries.csv"), os.path.join(outdir, "curve.csv")]
    write_queries(report, paths[0])
    write_curve(report, paths[1])
    if report.gract_rows:
        paths.append(os.path.join(outdir, "gract.csv"))
        write_gract(report.gract_rows, paths[-1])
    if svg:
        paths.append(os.path.join(outdir, "latency.svg"))
        with _open(paths[-1]) as f:
            f.write(latency_svg(report))
        if report.gract_rows:
            paths.append(os.path.join(outdir, "gract.svg"))
            with _open(paths[-1]) as f:
                f.write(gract_svg(report.gract_rows))
    return paths


# --------------------------------------------------------------------------
# minimal SVG renderings


def latency_svg(report: RunReport, width: int = 800, height: int = 300) -> str:
    """Latency per query id as a polyline."""
    pts = [(r.query_id, r.latency_us) for r in report.rows if r.latency_us is not None]
    if not pts:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"/>\n'
    x0, x1 = pts[0][0], max(pts[-1][0], pts[0][0] + 1)
    y1 = max(y for _, y in pts) or 1
    coords = " ".join(f"{(x - x0) / (x1 - x0) * (width - 40) + 30:.1f},{height - 20 - y / y1 * (height - 40):.1f}"
                      for x, y in pts)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
            f'<text x="30" y="14" font-size="12">latency (max {y1 / 1000:.1f} ms) by query id</text>\n'
            f'<polyline fill="none" stroke="black" stroke-width="0.5" points="{coords}"/>\n</svg>\n')


def gract_svg(rows, cell: int = 6) -> str:
    """Instance x window heatmap, darker is busier."""
    insts = sorted({(n, i) for n, i, _, _ in rows})
    times = sorted({t for _, _, t, _ in rows})
    ix = {k: j for j, k in enumerate(insts)}
    tx = {t: j for j, t in enumerate(times)}
    w, h = len(times) * cell + 80, len(insts) * cell * 2 + 10
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">']
    for j, (n, i) in enumerate(insts):
        parts.append(f'<text x="0" y="{j * cell * 2 + cell + 5}" font-size="8">{i}</text>')
    for n, i, t, g in rows:
        shade = int(255 * (1 - min(1.0, max(0.0, g))))
        parts.append(f'<rect x="{tx[t] * cell + 70}" y="{ix[(n, i)] * cell * 2 + 5}" width="{cell}" '
                     f'height="{cell * 2}" fill="rgb({shade},{shade},{shade})"/>')
    parts.append("</svg>\n")
    return "\n".join(parts)
