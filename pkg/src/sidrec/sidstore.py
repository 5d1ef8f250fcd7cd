"""Hashed-SID edge store with reverse lookup and collision analytics."""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1

MAGIC = b"SIDE"
VERSION = 1
_REC = struct.Struct("<QQI")


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def sid_bytes(sid) -> bytes:
    c1, c2, c3 = (int(v) for v in sid)
    return struct.pack("<IIQ", c1, c2, c3)


def sid_hash(sid) -> int:
    return fnv1a_64(sid_bytes(sid))


class SidConsistencyError(ValueError):
    """An item was observed under two different SIDs."""


@dataclass
class CollisionReport:
    collision_rate: float
    edge_num: float
    hr_at_k: dict
    bucket_collision_rate: float = 0.0
    n_items: int = 0
    n_buckets: int = 0
    n_queries: int = 0

    def as_pairs(self, prefix: str = ""):
        yield f"{prefix}collision_rate", self.collision_rate
        yield f"{prefix}edge_num", self.edge_num
        for k in sorted(self.hr_at_k):
            yield f"{prefix}hr@{k}", self.hr_at_k[k]
        yield f"{prefix}bucket_collision_rate", self.bucket_collision_rate
        yield f"{prefix}n_items", self.n_items
        yield f"{prefix}n_buckets", self.n_buckets
        yield f"{prefix}n_queries", self.n_queries


@dataclass
class SidEdgeStore:
    """hash(SID) -> {item_id: observation_count}.

    Single writer; readers that need a consistent view call :meth:`snapshot`.
    """
    edges: dict = field(default_factory=dict)
    item_hash: dict = field(default_factory=dict)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)

    @property
    def total_items(self) -> int:
        return len(self.item_hash)

    def insert_observation(self, item_id: int, sid) -> None:
        h = sid_hash(sid)
        item_id = int(item_id)
        with self._lock:
            prev = self.item_hash.get(item_id)
            if prev is not None and prev != h:
                raise SidConsistencyError(
                    f"item {item_id} already stored under hash {prev:#x}, got {h:#x}")
            self.item_hash[item_id] = h
            bucket = self.edges.setdefault(h, {})
            bucket[item_id] = bucket.get(item_id, 0) + 1

    def lookup_hash(self, h: int) -> list:
        bucket = self.edges.get(h)
        if not bucket:
            return []
        return [i for i, _ in sorted(bucket.items(), key=lambda kv: (-kv[1], kv[0]))]

    def reverse_lookup(self, sid) -> list:
        """Items under the SID, most observed first, then by ascending id."""
        return self.lookup_hash(sid_hash(sid))

    def snapshot(self) -> "SidEdgeStore":
        with self._lock:
            return SidEdgeStore({h: dict(b) for h, b in self.edges.items()}, dict(self.item_hash))

    def save(self, path) -> None:
        snap = self.snapshot()
        recs = sorted((h, i, c) for h, b in snap.edges.items() for i, c in b.items())
        parts = [MAGIC, struct.pack("<IQ", VERSION, len(recs))]
        parts.extend(_REC.pack(*r) for r in recs)
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path) -> "SidEdgeStore":
        buf = Path(path).read_bytes()
        if buf[:4] != MAGIC:
            raise ValueError(f"{path}: not an SID edge store (bad magic)")
        version, n = struct.unpack_from("<IQ", buf, 4)
        if version != VERSION:
            raise ValueError(f"{path}: unsupported store version {version}")
        off = 4 + 12
        if len(buf) != off + n * _REC.size:
            raise ValueError(f"{path}: record count {n} does not match file size")
        store = cls()
        for h, item, count in _REC.iter_unpack(buf[off:]):
            if item in store.item_hash and store.item_hash[item] != h:
                raise SidConsistencyError(f"{path}: item {item} appears under two hashes")
            store.item_hash[item] = h
            store.edges.setdefault(h, {})[item] = count
        return store


def collision_report(store: SidEdgeStore, queries, ks=(1, 10)) -> CollisionReport:
    """Collision rate, EdgeNum and HR@K.

    ``collision_rate`` counts items whose bucket holds at least two distinct
    items, as a percentage of all distinct items. ``edge_num`` and ``hr@K``
    are averaged over the query items.
    """
    queries = list(queries)
    if not queries:
        raise ValueError("collision_report needs at least one query")
    snap = store.snapshot()
    if not snap.item_hash:
        raise ValueError("collision_report on an empty store")
    shared = sum(len(b) for b in snap.edges.values() if len(b) >= 2)
    n_items = snap.total_items
    n_buckets = len(snap.edges)
    ks = sorted({int(k) for k in ks})
    hits = dict.fromkeys(ks, 0)
    edge_total = 0
    for item_id, sid in queries:
        ranked = snap.reverse_lookup(sid)
        edge_total += len(ranked)
        pos = ranked.index(int(item_id)) if int(item_id) in ranked else None
        for k in ks:
            if pos is not None and pos < k:
                hits[k] += 1
    nq = len(queries)
    return CollisionReport(
        collision_rate=100.0 * shared / n_items,
        edge_num=edge_total / nq,
        hr_at_k={k: hits[k] / nq for k in ks},
        bucket_collision_rate=100.0 * sum(len(b) >= 2 for b in snap.edges.values()) / n_buckets,
        n_items=n_items, n_buckets=n_buckets, n_queries=nq)


def build_store(item_ids, codes) -> SidEdgeStore:
    store = SidEdgeStore()
    for item, sid in zip(item_ids, codes):
        store.insert_observation(int(item), tuple(int(c) for c in sid))
    return store
