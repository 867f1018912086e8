import asyncio
import base64
import csv
import json
import os
import subprocess
import sys
from fractions import Fraction

import pytest

from slopipe import cli
from slopipe.config import DeploymentConfig
from slopipe.deploy import deploy
from slopipe.errors import ConfigError
from slopipe.executor import latency_model
from slopipe.server import QueryService

DATA = os.path.join(os.path.dirname(cli.__file__), "data")
PREFLMR = os.path.join(DATA, "preflmr_4node.json")


def test_config_round_trip(tmp_path):
    for name in ("preflmr_4node.json", "resize.json", "sweep.json"):
        cfg = DeploymentConfig.load(os.path.join(DATA, name))
        cfg.validate()
        again = DeploymentConfig.from_json(json.loads(json.dumps(cfg.to_json())), cfg.base_dir)
        assert again == cfg
        cfg.dump(tmp_path / name)
        assert DeploymentConfig.load(tmp_path / name).to_json() == cfg.to_json()


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        DeploymentConfig.from_json({"bogus": 1})
    with pytest.raises(ConfigError):
        DeploymentConfig.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        DeploymentConfig.load(bad)
    cfg = DeploymentConfig(profiles="nowhere.csv", base_dir=str(tmp_path))
    with pytest.raises(ConfigError):
        cfg.validate()
    with pytest.raises(ConfigError):
        DeploymentConfig(mode="turbo").validate()


def test_plan_command(tmp_path, capsys):
    out = tmp_path / "placement.json"
    assert cli.main(["plan", PREFLMR, "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "vision-enc" in text and "qps" in text
    doc = json.loads(out.read_text())
    full_b = [n for n, lay in doc["y"].items() if lay == [24]
              and {r["model"] for r in doc["x"] if str(r["node"]) == n} == {"vision-enc"}]
    assert len(full_b) == 3
    assert cli.main(["plan", PREFLMR, "--baseline", "monolithic"]) == 0
    assert "cross-attn+search+text-enc+vision-enc" in capsys.readouterr().out


def test_plan_infeasible_exit_2(tmp_path, capsys):
    (tmp_path / "p.csv").write_text(
        "model_id,instance_size_gb,batch_size,latency_ms,throughput_qps,memory_gb\n"
        "huge,24,1,10,100,30\n")
    (tmp_path / "pipe.json").write_text(json.dumps({
        "name": "x", "ingress": "in", "egress": "H",
        "stages": [{"id": "H", "model": "huge", "incast": ["in"]}], "edges": [["in", "H"]]}))
    (tmp_path / "c.json").write_text(json.dumps({"profiles": "p.csv", "pipeline": "pipe.json"}))
    assert cli.main(["plan", str(tmp_path / "c.json")]) == cli.EXIT_INFEASIBLE
    assert "infeasible" in capsys.readouterr().err


def test_missing_config_exit_1(tmp_path):
    assert cli.main(["plan", str(tmp_path / "nope.json")]) == cli.EXIT_CONFIG


def test_bench_and_report(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["bench", PREFLMR, "--out", str(out), "--svg"]) == 0
    for f in ("queries.csv", "curve.csv", "gract.csv", "exec_log.csv", "actions.csv", "placement.json",
              "latency.svg", "gract.svg"):
        assert (out / f).exists(), f
    capsys.readouterr()
    assert cli.main(["report", str(out)]) == 0
    text = capsys.readouterr().out
    with open(out / "queries.csv") as fh:
        rows = list(csv.DictReader(fh))
    misses = sum(int(r["miss_200ms"]) for r in rows)
    frac = Fraction(misses, len(rows))
    assert f"miss@200ms={frac.numerator}/{frac.denominator}" in text


def test_bench_slo_exit_3(tmp_path):
    cfg = DeploymentConfig.load(PREFLMR)
    cfg.slos[0].allowed_miss_rate = 0.0
    cfg.slos[0].latency_ms = 50
    cfg.workload.phases[0].count = 300
    cfg.base_dir = DATA
    path = tmp_path / "tight.json"
    doc = cfg.to_json()
    doc["profiles"] = os.path.join(DATA, "retrieval_profiles.csv")
    doc["pipeline"] = os.path.join(DATA, "retrieval_pipeline.json")
    path.write_text(json.dumps(doc))
    assert cli.main(["bench", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_SLO


def test_bench_load_sweep(tmp_path):
    out = tmp_path / "sweep"
    assert cli.main(["bench", os.path.join(DATA, "sweep.json"), "--out", str(out), "--rates", "10,20,30"]) == 0
    assert len((out / "curve.csv").read_text().splitlines()) == 4


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "slopipe", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for sub in ("plan", "bench", "serve", "report"):
        assert sub in r.stdout


# -- query service


def service(jitter=0.0):
    cfg = DeploymentConfig.load(PREFLMR)
    cfg.jitter = jitter
    return QueryService(deploy(cfg))


async def roundtrip(svc, lines):
    srv = await svc.start("127.0.0.1", 0)
    port = srv.sockets[0].getsockname()[1]
    r, w = await asyncio.open_connection("127.0.0.1", port)
    for line in lines:
        w.write(line.encode() + b"\n")
    await w.drain()
    out = [json.loads(await r.readline()) for _ in lines]
    w.close()
    await svc.shutdown()
    return out


def q(payload=b"img", pipeline="preflmr"):
    return json.dumps({"type": "query", "pipeline": pipeline, "payload": base64.b64encode(payload).decode()})


def test_idle_query_latency_is_sum_of_stages():
    svc = service()
    (resp,) = asyncio.run(roundtrip(svc, [q()]))
    assert resp["type"] == "result" and resp["id"] == 1
    rt, ex = svc.rt, svc.d.executor
    rec = rt.pipeline("preflmr").records[1]
    lat = {}
    for s in ("A", "B", "C", "D"):
        inst = ex.instance(rec.routing_tags[s])
        lat[s] = latency_model(ex.profiles[rt.pipeline("preflmr").spec.stage(s).model_id], inst.size, 1) * 1000
    critical = max(lat["A"], lat["B"]) + lat["C"] + lat["D"]
    # three handoffs on the critical path, each at most a remote hop
    assert critical <= resp["latency_us"] <= critical + 3 * 200 + 3
    assert base64.b64decode(resp["payload"]) == b"imgimg"  # C joins both upstream outputs


def test_malformed_lines_keep_connection():
    svc = service()
    out = asyncio.run(roundtrip(svc, ["{oops", "[1,2]", json.dumps({"type": "dance"}),
                                      json.dumps({"type": "query", "payload": "***"}), q(pipeline="nope"), q()]))
    assert [o["type"] for o in out] == ["error"] * 5 + ["result"]


def test_stats_match_recount():
    svc = service(jitter=0.05)
    out = asyncio.run(roundtrip(svc, [q()] * 40 + [json.dumps({"type": "stats"})]))
    frames = [o for o in out if o["type"] == "result"]
    assert len(frames) == 40
    stats = next(o for o in out if o["type"] == "stats")["preflmr"]
    lats = [f["latency_us"] for f in frames]
    assert stats["completed"] == 40
    for ms in (200, 500):
        assert stats["miss_rate"][str(ms)] == sum(1 for x in lats if x > ms * 1000) / 40
    assert stats["p50_us"] == sorted(lats)[19]


def test_concurrent_frames_never_interleave():
    svc = service()

    async def go():
        srv = await svc.start("127.0.0.1", 0)
        port = srv.sockets[0].getsockname()[1]
        r, w = await asyncio.open_connection("127.0.0.1", port)
        w.write(b"".join((q(bytes([65 + i % 26]) * 3000) + "\n").encode() for i in range(30)))
        await w.drain()
        lines = [await r.readline() for _ in range(30)]
        w.close()
        await svc.shutdown()
        return lines

    lines = asyncio.run(go())
    ids = sorted(json.loads(l)["id"] for l in lines)
    assert ids == list(range(1, 31))
