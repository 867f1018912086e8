"""Sharded, versioned key-value store with trigger upcalls.

Keys are slash-separated paths. An object pool owns a path prefix and maps
each key under it onto one of its shards; every shard is replicated on a
small set of member nodes. Puts are ordered by the shard coordinator and
applied by every replica in that order, firing triggers on each replica.
A version becomes *stable* once every live replica has applied it; reads
are served only from stable versions.

Hashing: FNV-1a 64-bit over the UTF-8 key (or affinity group key), modulo
the pool's shard count.
"""
from __future__ import annotations

import bisect
import csv
import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Mapping

from .errors import (
    BadRange,
    BadRoute,
    NoSuchHandler,
    NoSuchPool,
    NotFound,
    NotStable,
    NoWorker,
    PoolExists,
    TooOld,
)
from .simloop import ManualClock

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1

Node = Hashable
ShardId = tuple  # (pool prefix, shard index)


def fnv1a64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def normalize_prefix(prefix: str) -> str:
    if not prefix or not prefix.startswith("/"):
        raise ValueError(f"prefix must be an absolute path: {prefix!r}")
    return prefix.rstrip("/") or "/"


def under(key: str, prefix: str) -> bool:
    """Path-wise prefix test: '/a/b' is under '/a' but '/ab' is not."""
    if prefix == "/":
        return True
    return key == prefix or key.startswith(prefix + "/")


def shard_name(shard: ShardId) -> str:
    return f"{shard[0]}#{shard[1]}"


@dataclass(frozen=True)
class VersionedObject:
    key: str
    version: int
    timestamp: int
    payload: bytes
    stable: bool


@dataclass
class ObjectPool:
    prefix: str
    shard_count: int
    replicas_per_shard: int = 2
    max_versions: int | None = None
    members: list[list[Node]] = field(default_factory=list)


@dataclass(frozen=True)
class AffinityGroup:
    group_key: str
    members: frozenset


@dataclass(frozen=True)
class TriggerRegistration:
    prefix: str
    handler_id: str


@dataclass(frozen=True)
class TriggerEvent:
    """Argument handed to a trigger handler. ``payload`` is the caller's object, not a copy."""

    key: str
    payload: bytes
    node: Node
    kind: str  # "put" | "trigger"
    version: int | None = None
    timestamp: int | None = None


@dataclass
class _Version:
    version: int
    ts: int
    payload: bytes
    seq: int


@dataclass
class _Op:
    seq: int
    ts: int
    key: str
    version: int
    payload: bytes


class _Replica:
    def __init__(self, node: Node, applied_seq: int = 0):
        self.node = node
        self.applied_seq = applied_seq
        self.active = True
        self.paused = False
        self.inbox: deque[_Op] = deque()
        self.delivered = 0  # per-replica delivery counter for the event log


class _Shard:
    def __init__(self, sid: ShardId, pool: ObjectPool, members: list[Node], rr_offset: int):
        self.id = sid
        self.pool = pool
        self.replicas: dict[Node, _Replica] = {n: _Replica(n) for n in members}
        self.ops: list[_Op] = []  # ops[i] has seq i+1
        self.op_ts: list[int] = []  # strictly increasing; parallel to ops
        self.last_ts = 0
        self.sealed_ts = 0
        self.rr_offset = rr_offset
        self.rr_count = 0

    def live(self) -> list[_Replica]:
        return [r for r in self.replicas.values() if r.active]

    @property
    def stable_seq(self) -> int:
        live = self.live()
        if not live:
            return 0
        return min(r.applied_seq for r in live)

    def threshold(self) -> int:
        s = self.stable_seq
        ts = self.ops[s - 1].ts if s else 0
        if s == len(self.ops):
            ts = max(ts, self.sealed_ts)
        return ts


class Session:
    """Client session; gives read-your-writes on ``get``."""

    def __init__(self, store: "KVStore"):
        self.store = store
        self.written: dict[str, int] = {}


class KVStore:
    """In-process model of the sharded store.

    ``clock`` returns logical microseconds. When ``loop`` is given, routed
    trigger deliveries and failure-detection reissues are scheduled on it;
    otherwise they happen synchronously.
    """

    def __init__(
        self,
        clock: Callable[[], int] | None = None,
        handlers: Mapping[str, Callable[[TriggerEvent], object]] | None = None,
        seed: int = 0,
        loop=None,
        delivery_delay_us: int = 0,
        detect_timeout_us: int = 50_000,
    ):
        self.loop = loop
        self.clock = clock or (loop if loop is not None else ManualClock())
        self.handlers = handlers if handlers is not None else {}
        self.seed = seed
        self.delivery_delay_us = delivery_delay_us
        self.detect_timeout_us = detect_timeout_us
        self.pools: dict[str, ObjectPool] = {}
        self.shards: dict[ShardId, _Shard] = {}
        self.history: dict[str, list[_Version]] = {}
        self.triggers: list[TriggerRegistration] = []
        self.groups: dict[str, AffinityGroup] = {}
        self._group_of: dict[str, str] = {}
        self.events: list[tuple] = []  # (shard, replica, seq, op, key, version, ts)
        self.undeliverable: list[tuple[str, Node]] = []
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)

    # ------------------------------------------------------------------ pools
    def create_pool(
        self,
        prefix: str,
        shard_count: int,
        replicas: int = 2,
        members: list[list[Node]] | None = None,
        max_versions: int | None = None,
    ) -> ObjectPool:
        prefix = normalize_prefix(prefix)
        if shard_count < 1 or replicas < 1:
            raise ValueError("shard_count and replicas must be >= 1")
        if max_versions is not None and max_versions < 1:
            raise ValueError("max_versions must be >= 1")
        with self._lock:
            for other in self.pools:
                if under(prefix, other) or under(other, prefix):
                    raise PoolExists(f"{prefix} overlaps existing pool {other}")
            if members is None:
                members = [[s * replicas + j for j in range(replicas)] for s in range(shard_count)]
            if len(members) != shard_count:
                raise ValueError("members must list one node set per shard")
            pool = ObjectPool(prefix, shard_count, replicas, max_versions, [list(m) for m in members])
            self.pools[prefix] = pool
            for i, m in enumerate(pool.members):
                sid = (prefix, i)
                offset = random.Random(f"{self.seed}:{shard_name(sid)}").randrange(1 << 30)
                self.shards[sid] = _Shard(sid, pool, m, offset)
            return pool

    def pool_of(self, key: str) -> ObjectPool:
        if not key:
            raise ValueError("empty key")
        best = None
        for prefix, pool in self.pools.items():
            if under(key, prefix) and (best is None or len(prefix) > len(best.prefix)):
                best = pool
        if best is None:
            raise NoSuchPool(key)
        return best

    def shard_of(self, key: str) -> ShardId:
        pool = self.pool_of(key)
        group = self._group_of.get(key)
        h = fnv1a64(group if group is not None else key)
        return (pool.prefix, h % pool.shard_count)

    def add_affinity_group(self, group_key: str, keys: Iterable[str]) -> AffinityGroup:
        keys = list(keys)
        with self._lock:
            pools = {self.pool_of(k).prefix for k in keys}
            if len(pools) > 1:
                raise ValueError("affinity group members must share one pool")
            for k in keys:
                if k in self.history and self._group_of.get(k) != group_key:
                    # moving an existing key would orphan its history on the old shard
                    raise ValueError(f"key {k} already holds data outside the group")
            prev = self.groups.get(group_key)
            members = frozenset(keys) | (prev.members if prev else frozenset())
            group = AffinityGroup(group_key, members)
            self.groups[group_key] = group
            for k in keys:
                self._group_of[k] = group_key
            return group

    def affinity_group_of(self, key: str) -> AffinityGroup | None:
        g = self._group_of.get(key)
        return self.groups[g] if g is not None else None

    # ------------------------------------------------------------ membership
    def members(self, shard: ShardId, live_only: bool = True) -> list[Node]:
        s = self._shard(shard)
        return [r.node for r in s.replicas.values() if r.active or not live_only]

    def add_member(self, shard: ShardId, node: Node) -> None:
        with self._lock:
            s = self._shard(shard)
            if node in s.replicas:
                s.replicas[node].active = True
                return
            # joining replica receives a state transfer of everything ordered so far
            s.replicas[node] = _Replica(node, applied_seq=len(s.ops))
            s.pool.members[shard[1]].append(node)

    def remove_member(self, shard: ShardId, node: Node) -> None:
        with self._lock:
            s = self._shard(shard)
            s.replicas.pop(node, None)
            if node in s.pool.members[shard[1]]:
                s.pool.members[shard[1]].remove(node)
            self._cond.notify_all()

    def fail_node(self, node: Node) -> None:
        with self._lock:
            for s in self.shards.values():
                if node in s.replicas:
                    s.replicas[node].active = False
            self._cond.notify_all()

    def recover_node(self, node: Node) -> None:
        with self._lock:
            for s in self.shards.values():
                r = s.replicas.get(node)
                if r is not None and not r.active:
                    r.active = True
                    r.applied_seq = len(s.ops)
                    r.inbox.clear()

    def pause_replica(self, shard: ShardId, node: Node) -> None:
        """Test hook: the replica stops applying (and acknowledging) ops."""
        with self._lock:
            self._shard(shard).replicas[node].paused = True

    def resume_replica(self, shard: ShardId, node: Node) -> None:
        with self._lock:
            s = self._shard(shard)
            r = s.replicas[node]
            r.paused = False
            keys = set()
            while r.inbox:
                op = r.inbox.popleft()
                keys.add(op.key)
                self._apply(s, r, op)
            for key in sorted(keys):
                self._evict(s, key)
            self._cond.notify_all()

    # -------------------------------------------------------------- triggers
    def register_trigger(self, prefix: str, handler_id: str) -> TriggerRegistration:
        prefix = normalize_prefix(prefix)
        if handler_id not in self.handlers:
            raise NoSuchHandler(handler_id)
        reg = TriggerRegistration(prefix, handler_id)
        with self._lock:
            self.triggers.append(reg)
        return reg

    def _matching(self, key: str) -> list[Callable]:
        return [self.handlers[t.handler_id] for t in self.triggers if under(key, t.prefix)]

    # ------------------------------------------------------------------ puts
    def put(self, key: str, payload: bytes, ts: int | None = None, session: Session | None = None) -> VersionedObject:
        with self._lock:
            sid = self.shard_of(key)
            s = self.shards[sid]
            threshold = s.threshold()
            if ts is None:
                ts = max(int(self.clock()), s.last_ts + 1, threshold + 1)
            elif ts <= threshold:
                raise TooOld(f"ts {ts} <= stability threshold {threshold} of {shard_name(sid)}")
            elif ts <= s.last_ts:
                raise TooOld(f"ts {ts} precedes the last ordered put ({s.last_ts}) of {shard_name(sid)}")
            hist = self.history.setdefault(key, [])
            version = hist[-1].version + 1 if hist else 1
            # versions can have been evicted; continue numbering from the retained tail
            op = _Op(len(s.ops) + 1, ts, key, version, payload)
            s.ops.append(op)
            s.op_ts.append(ts)
            s.last_ts = ts
            hist.append(_Version(version, ts, payload, op.seq))
            for r in list(s.replicas.values()):
                if not r.active:
                    continue
                if r.paused:
                    r.inbox.append(op)
                else:
                    self._apply(s, r, op)
            self._evict(s, key)
            self._cond.notify_all()
            if session is not None:
                session.written[key] = version
            return VersionedObject(key, version, ts, payload, op.seq <= s.stable_seq)

    def _apply(self, s: _Shard, r: _Replica, op: _Op) -> None:
        r.applied_seq = op.seq
        r.delivered += 1
        self.events.append((shard_name(s.id), r.node, r.delivered, "put", op.key, op.version, op.ts))
        for fn in self._matching(op.key):
            fn(TriggerEvent(op.key, op.payload, r.node, "put", op.version, op.ts))

    def _evict(self, s: _Shard, key: str) -> None:
        cap = s.pool.max_versions
        if cap is None:
            return
        stable = s.stable_seq
        hist = self.history.get(key)
        while hist and len(hist) > cap and hist[0].seq <= stable:
            hist.pop(0)

    def trigger_put_routed(self, key: str, payload: bytes, target: Node) -> Node:
        with self._lock:
            sid = self.shard_of(key)
            s = self.shards[sid]
            if target not in s.replicas:
                raise BadRoute(f"{target!r} is not a member of {shard_name(sid)}")
            token = [False]
            if self.loop is not None and self.delivery_delay_us > 0:
                self.loop.call_later(self.delivery_delay_us, self._deliver_routed, sid, key, payload, target, token)
            else:
                self._deliver_routed(sid, key, payload, target, token)
            return target

    def _deliver_routed(self, sid: ShardId, key: str, payload: bytes, target: Node, token: list) -> None:
        if token[0]:
            return
        s = self.shards[sid]
        r = s.replicas.get(target)
        if r is not None and r.active:
            token[0] = True
            self._fire_trigger(s, r, key, payload, "trigger_routed")
            return
        # target is down: reissue to a live member once the failure is detected
        if self.loop is not None and self.detect_timeout_us > 0:
            self.loop.call_later(self.detect_timeout_us, self._reissue, sid, key, payload, token)
        else:
            self._reissue(sid, key, payload, token)

    def _reissue(self, sid: ShardId, key: str, payload: bytes, token: list) -> None:
        if token[0]:
            return
        s = self.shards[sid]
        try:
            node = self._balanced_choice(s)
        except NoWorker:
            self.undeliverable.append((key, None))
            return
        token[0] = True
        self._fire_trigger(s, s.replicas[node], key, payload, "trigger_reissued")

    def _balanced_choice(self, s: _Shard) -> Node:
        live = s.live()
        if not live:
            raise NoWorker(shard_name(s.id))
        node = live[(s.rr_offset + s.rr_count) % len(live)].node
        s.rr_count += 1
        return node

    def trigger_put_balanced(self, key: str, payload: bytes) -> Node:
        with self._lock:
            s = self.shards[self.shard_of(key)]
            node = self._balanced_choice(s)
            self._fire_trigger(s, s.replicas[node], key, payload, "trigger_balanced")
            return node

    def _fire_trigger(self, s: _Shard, r: _Replica, key: str, payload: bytes, op: str) -> None:
        r.delivered += 1
        self.events.append((shard_name(s.id), r.node, r.delivered, op, key, "", int(self.clock())))
        for fn in self._matching(key):
            fn(TriggerEvent(key, payload, r.node, "trigger"))

    # ----------------------------------------------------------------- reads
    def _shard(self, shard: ShardId) -> _Shard:
        try:
            return self.shards[tuple(shard)]
        except KeyError:
            raise NoSuchPool(str(shard)) from None

    def _wait(self, ready: Callable[[], bool], timeout: float | None, what: str) -> None:
        deadline = None if timeout is None else time.monotonic() + timeout
        while not ready():
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                raise NotStable(what)
            self._cond.wait(remaining if remaining is not None else 0.05)

    def _stable_versions(self, key: str) -> list[_Version]:
        s = self.shards[self.shard_of(key)]
        stable = s.stable_seq
        return [v for v in self.history.get(key, ()) if v.seq <= stable]

    def get(self, key: str, session: Session | None = None, timeout: float | None = None) -> VersionedObject:
        """Latest stable version. Blocks while only unstable versions exist."""
        with self._lock:
            self.pool_of(key)
            if not self.history.get(key):
                raise NotFound(key)
            s = self.shards[self.shard_of(key)]
            own = session.written.get(key) if session is not None else None

            def ready() -> bool:
                stable = self._stable_versions(key)
                if not stable:
                    return False
                return own is None or stable[-1].version >= own

            self._wait(ready, timeout, f"get {key}")
            v = self._stable_versions(key)[-1]
            assert v.seq <= s.stable_seq
            return VersionedObject(key, v.version, v.ts, v.payload, True)

    def get_at(self, key: str, t: int, timeout: float | None = None) -> VersionedObject:
        """Most recent stable version with timestamp <= t."""
        with self._lock:
            self.pool_of(key)
            if key not in self.history:
                raise NotFound(key)
            s = self.shards[self.shard_of(key)]

            def ready() -> bool:
                if t <= s.threshold():
                    return True
                if t > self.clock():
                    return False
                # every op at or before t must be applied everywhere
                n_at_or_before = bisect.bisect_right(s.op_ts, t)
                return n_at_or_before <= s.stable_seq

            self._wait(ready, timeout, f"get_at {key}@{t}")
            if t > s.last_ts and t > s.sealed_ts:
                # later puts must now land strictly after t
                s.sealed_ts = t
            best = None
            for v in self.history[key]:
                if v.ts <= t and v.seq <= s.stable_seq:
                    best = v
            if best is None:
                raise NotFound(f"{key} has no stable version at or before {t}")
            return VersionedObject(key, best.version, best.ts, best.payload, True)

    def get_versions(self, key: str, t_from: int, t_to: int) -> list[VersionedObject]:
        if t_from > t_to:
            raise BadRange(f"[{t_from}, {t_to}]")
        with self._lock:
            self.pool_of(key)
            return [
                VersionedObject(key, v.version, v.ts, v.payload, True)
                for v in self._stable_versions(key)
                if t_from <= v.ts <= t_to
            ]

    def stability_threshold(self, shard: ShardId) -> int:
        with self._lock:
            return self._shard(shard).threshold()

    def session(self) -> Session:
        return Session(self)

    # ------------------------------------------------------------------ logs
    def replica_log(self, shard: ShardId, node: Node) -> list[tuple]:
        name = shard_name(tuple(shard))
        return [e for e in self.events if e[0] == name and e[1] == node]

    def write_event_log(self, path) -> None:
        rows = sorted(self.events, key=lambda e: (e[0], str(e[1]), e[2]))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["shard_id", "replica_id", "seq", "op", "key", "version", "ts_us"])
            w.writerows(rows)
