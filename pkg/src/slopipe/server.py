"""Newline-delimited JSON query service over TCP.

Requests and responses are one JSON object per line:

    {"type": "query", "pipeline": "preflmr", "payload": "<base64>"}
    -> {"type": "result", "id": 7, "latency_us": 61234, "payload": "<base64>"}
    {"type": "stats"}
    -> {"type": "stats", ...report snapshot...}

A malformed line gets ``{"type": "error", "reason": ...}`` and the
connection stays open. Each connection writes whole frames under a lock, so
responses never interleave.

In simulate mode every query runs the event loop until it completes, so
``latency_us`` is simulated time. In live mode the event loop is paced
against the wall clock and queries overlap.
"""
from __future__ import annotations

import asyncio
import base64
import binascii
import json
import logging
import time

from . import bench
from .errors import SlopipeError

log = logging.getLogger("slopipe.serve")


class QueryService:
    def __init__(self, deployment, mode: str = "simulate"):
        self.d = deployment
        self.rt = deployment.runtime
        self.loop_sim = deployment.loop
        self.mode = mode
        self.lock = asyncio.Lock()
        self.waiters: dict[int, asyncio.Future] = {}
        self.rt.on_complete.append(self._completed)
        self._t0 = time.monotonic()
        self._pacer: asyncio.Task | None = None
        self.server: asyncio.AbstractServer | None = None

    def _completed(self, rec) -> None:
        fut = self.waiters.pop(rec.query_id, None)
        if fut is not None and not fut.done():
            fut.set_result(rec)

    def _wall_us(self) -> int:
        return int((time.monotonic() - self._t0) * 1e6)

    async def _pace(self) -> None:
        while True:
            self.loop_sim.run(until=max(self.loop_sim.now, self._wall_us()))
            await asyncio.sleep(0.001)

    async def submit(self, pipeline: str, payload: bytes):
        if self.mode == "live":
            qid = self.rt.ingress_submit(pipeline, payload)
            fut = asyncio.get_running_loop().create_future()
            self.waiters[qid] = fut
            return await fut
        async with self.lock:
            qid = self.rt.ingress_submit(pipeline, payload)
            pipe = self.rt.pipeline(pipeline)
            rec = pipe.records[qid]
            self.loop_sim.run(stop=lambda: rec.status != "in_flight")
            self.waiters.pop(qid, None)
            return rec

    def stats(self) -> dict:
        out = {"type": "stats"}
        for name in sorted(self.rt.pipelines):
            rows = bench.rows_from_runtime(self.rt, name)
            report = bench.RunReport(rows, slos=list(self.d.cfg.slos))
            out[name] = report.snapshot()
        return out

    async def handle_line(self, line: bytes) -> dict:
        try:
            req = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            return {"type": "error", "reason": f"malformed JSON: {e}"}
        if not isinstance(req, dict):
            return {"type": "error", "reason": "request must be a JSON object"}
        kind = req.get("type")
        if kind == "stats":
            return self.stats()
        if kind != "query":
            return {"type": "error", "reason": f"unknown request type {kind!r}"}
        try:
            payload = base64.b64decode(req.get("payload", ""), validate=True)
        except (binascii.Error, TypeError) as e:
            return {"type": "error", "reason": f"payload is not base64: {e}"}
        pipeline = req.get("pipeline", self.d.spec.name)
        try:
            rec = await self.submit(pipeline, payload)
        except SlopipeError as e:
            return {"type": "error", "reason": f"{type(e).__name__}: {e}"}
        if rec.status != "done":
            return {"type": "error", "id": rec.query_id, "reason": rec.error or "query failed"}
        result = rec.result if isinstance(rec.result, bytes) else str(rec.result).encode()
        return {"type": "result", "id": rec.query_id, "latency_us": rec.latency_us,
                "payload": base64.b64encode(result).decode("ascii")}

    async def handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        wlock = asyncio.Lock()
        tasks = set()

        async def respond(line):
            resp = await self.handle_line(line)
            frame = (json.dumps(resp, sort_keys=True) + "\n").encode()
            async with wlock:
                writer.write(frame)
                await writer.drain()

        try:
            while True:
                line = await reader.readline()
                if not line:
                    break
                if not line.strip():
                    continue
                t = asyncio.create_task(respond(line))
                tasks.add(t)
                t.add_done_callback(tasks.discard)
            if tasks:
                await asyncio.gather(*tasks, return_exceptions=True)
        finally:
            writer.close()

    async def start(self, host: str, port: int) -> asyncio.AbstractServer:
        if self.mode == "live":
            self._pacer = asyncio.create_task(self._pace())
        self.server = await asyncio.start_server(self.handle, host, port)
        return self.server

    async def shutdown(self) -> int:
        """Stop accepting connections and drain every pipeline."""
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()
        if self._pacer is not None:
            self._pacer.cancel()
        drained = 0
        for name in sorted(self.rt.pipelines):
            drained += self.rt.drain(name)
        return drained


async def serve(deployment, host: str, port: int, mode: str = "simulate", ready=None) -> None:
    svc = QueryService(deployment, mode)
    server = await svc.start(host, port)
    addr = server.sockets[0].getsockname()
    log.info("listening on %s:%s", addr[0], addr[1])
    if ready is not None:
        ready(addr)
    try:
        await server.serve_forever()
    except asyncio.CancelledError:
        pass
    finally:
        n = await svc.shutdown()
        log.info("drained %d in-flight queries", n)
