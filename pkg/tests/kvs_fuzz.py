"""Seeded operation fuzzers for the store's consistency properties.

Each fuzzer runs a random mix of operations and returns the number of
violations it observed; zero is the only passing value.
"""
from __future__ import annotations

import random

from slopipe.errors import NotFound, NotStable, TooOld
from slopipe.kvs import KVStore
from slopipe.simloop import ManualClock


def _store(seed, shards=3, replicas=3):
    clock = ManualClock()
    fired = []
    kv = KVStore(clock=clock, seed=seed, handlers={"h": lambda e: fired.append((e.node, e.key, e.version))})
    kv.create_pool("/f", shards, replicas)
    kv.register_trigger("/f", "h")
    return kv, clock, fired


def _keys(rng, n=12):
    return [f"/f/k{i}" for i in range(n)]


def _step(kv, clock, rng, keys, sids):
    """One random mutation: a put, a pause or a resume."""
    r = rng.random()
    sid = rng.choice(sids)
    node = rng.choice(kv.members(sid, live_only=False))
    if r < 0.08:
        kv.pause_replica(sid, node)
    elif r < 0.2:
        kv.resume_replica(sid, node)
    else:
        clock.advance(rng.randint(0, 3))
        return kv.put(rng.choice(keys), rng.randbytes(4))
    return None


def version_contiguity(seed: int, ops: int = 10_000) -> int:
    rng = random.Random(seed)
    kv, clock, _ = _store(seed)
    keys, sids = _keys(rng), sorted(kv.shards)
    expected: dict[str, int] = {}
    bad = 0
    for _ in range(ops):
        v = _step(kv, clock, rng, keys, sids)
        if v is not None:
            expected[v.key] = expected.get(v.key, 0) + 1
            bad += v.version != expected[v.key]
    for sid in sids:
        for n in kv.members(sid, live_only=False):
            kv.resume_replica(sid, n)
    for k in keys:
        vs = [v.version for v in kv.get_versions(k, 0, clock.now + 10)]
        bad += vs != list(range(1, expected.get(k, 0) + 1))
        # any sub-range is a contiguous run
        if vs:
            a, b = sorted(rng.sample(range(clock.now + 1), 2))
            sub = [v.version for v in kv.get_versions(k, a, b)]
            bad += sub != list(range(sub[0], sub[0] + len(sub))) if sub else 0
    return bad


def replica_trigger_order(seed: int, ops: int = 10_000) -> int:
    rng = random.Random(seed)
    kv, clock, fired = _store(seed)
    keys, sids = _keys(rng), sorted(kv.shards)
    for _ in range(ops):
        _step(kv, clock, rng, keys, sids)
    for sid in sids:
        for n in kv.members(sid, live_only=False):
            kv.resume_replica(sid, n)
    bad = 0
    for sid in sids:
        logs = []
        for n in kv.members(sid, live_only=False):
            logs.append([(e[4], e[5]) for e in kv.replica_log(sid, n) if e[3] == "put"])
        bad += sum(1 for log in logs[1:] if log != logs[0])
    # handler upcalls, per replica, in the same order as the replica log
    for sid in sids:
        for n in kv.members(sid, live_only=False):
            upcalls = [(k, v) for node, k, v in fired if node == n and kv.shard_of(k) == sid]
            bad += upcalls != [(e[4], e[5]) for e in kv.replica_log(sid, n) if e[3] == "put"]
    return bad


def get_at_determinism(seed: int, ops: int = 10_000) -> int:
    rng = random.Random(seed)
    kv, clock, _ = _store(seed)
    keys, sids = _keys(rng), sorted(kv.shards)
    memo: dict[tuple[str, int], tuple] = {}
    bad = 0
    for i in range(ops):
        if rng.random() < 0.6:
            _step(kv, clock, rng, keys, sids)
            continue
        k = rng.choice(keys)
        th = kv.stability_threshold(kv.shard_of(k))
        t = rng.randint(0, th) if th else 0
        try:
            v = kv.get_at(k, t, timeout=0)
            got = (v.version, v.timestamp, bytes(v.payload))
        except NotFound:
            got = None
        except NotStable:
            bad += 1  # below the threshold a read never has to wait
            continue
        if (k, t) in memo:
            bad += memo[k, t] != got
        else:
            memo[k, t] = got
    return bad


def too_old_rejection(seed: int, ops: int = 10_000) -> int:
    rng = random.Random(seed)
    kv, clock, _ = _store(seed)
    keys, sids = _keys(rng), sorted(kv.shards)
    bad = 0
    snapshot: dict[str, list] = {}
    for i in range(ops):
        if rng.random() < 0.7:
            _step(kv, clock, rng, keys, sids)
            continue
        k = rng.choice(keys)
        sid = kv.shard_of(k)
        th = kv.stability_threshold(sid)
        stable_before = [(v.version, v.timestamp) for v in kv.get_versions(k, 0, th)]
        try:
            kv.put(k, b"late", ts=rng.randint(0, th))
            bad += 1
        except TooOld:
            pass
        # the stable prefix is unchanged by the rejected put
        bad += [(v.version, v.timestamp) for v in kv.get_versions(k, 0, th)] != stable_before
        snapshot[k] = stable_before
    return bad


def read_your_writes(seed: int, ops: int = 10_000) -> int:
    rng = random.Random(seed)
    kv, clock, _ = _store(seed)
    keys, sids = _keys(rng), sorted(kv.shards)
    sessions = [kv.session() for _ in range(4)]
    last: list[dict[str, int]] = [{} for _ in sessions]
    bad = 0
    for _ in range(ops):
        i = rng.randrange(len(sessions))
        k = rng.choice(keys)
        r = rng.random()
        if r < 0.45:
            clock.advance(rng.randint(0, 3))
            v = kv.put(k, b"x", session=sessions[i])
            last[i][k] = v.version
        elif r < 0.55:
            sid = rng.choice(sids)
            kv.pause_replica(sid, rng.choice(kv.members(sid, live_only=False)))
        elif r < 0.7:
            sid = rng.choice(sids)
            for n in kv.members(sid, live_only=False):
                kv.resume_replica(sid, n)
        elif k in last[i]:
            try:
                got = kv.get(k, session=sessions[i], timeout=0)
                bad += got.version < last[i][k]
            except NotStable:
                pass  # blocking (instead of returning an older version) is allowed
    return bad
