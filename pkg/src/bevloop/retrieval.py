"""Coarse stage: descriptor database and Top-K candidate selection.

Selection is a bounded max-heap over a linear scan of the eligible
prefix, O(n log K). Candidates must be at least ``exclusion`` scans
older than the query; ids inside (query_id - exclusion, query_id] are
never returned. A full-sort brute-force twin serves as the oracle in
tests and deliberately shares no code with the heap path.
"""

from __future__ import annotations

import heapq
from bisect import bisect_right, insort
from dataclasses import dataclass

import numpy as np

from .checkpoint import append_record, read_container
from .descriptor import GlobalDescriptor
from .errors import ConflictError, ContractError, DimensionError, NotFoundError


def _vec(d) -> np.ndarray:
    return d.v if isinstance(d, GlobalDescriptor) else np.asarray(d, dtype=np.float64)


def affinity(a, b) -> float:
    """Euclidean distance between two descriptors. Zero means identical."""
    va, vb = _vec(a), _vec(b)
    if va.shape != vb.shape:
        raise DimensionError(f"affinity: lengths disagree, {va.shape} vs {vb.shape}")
    return float(np.linalg.norm(va - vb))


@dataclass(frozen=True)
class CandidateSet:
    """Top-K result: (scan_id, affinity) entries ascending by affinity."""

    query_id: int
    entries: tuple
    k: int

    def __post_init__(self) -> None:
        affs = [a for _, a in self.entries]
        if any(b < a for a, b in zip(affs, affs[1:])):
            raise ContractError("candidates: affinities must be non-decreasing")
        if len(self.entries) > self.k:
            raise ContractError(f"candidates: {len(self.entries)} entries exceed k={self.k}")

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[int]:
        return [sid for sid, _ in self.entries]


class DescriptorDb:
    """Descriptors keyed by scan id, iterated ascending, optionally file-backed.

    Records are named ``desc/<id>``. The id→row matrix is cached between
    insertions so repeated queries pay one vstack, not one per call.
    """

    def __init__(self, path=None):
        self._ids: list[int] = []
        self._by_id: dict[int, np.ndarray] = {}
        self._matrix: np.ndarray | None = None
        self._path = path

    @classmethod
    def open(cls, path) -> "DescriptorDb":
        db = cls()
        for name, values in read_container(path).items():
            if not name.startswith("desc/"):
                continue
            sid = int(name[len("desc/") :])
            db._by_id[sid] = values.reshape(-1)
            db._ids.append(sid)
        db._ids.sort()
        db._path = path
        return db

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, scan_id: int) -> bool:
        return int(scan_id) in self._by_id

    def __iter__(self):
        for sid in self._ids:
            yield GlobalDescriptor(self._by_id[sid], sid)

    def ids(self) -> list[int]:
        return list(self._ids)

    def add(self, desc: GlobalDescriptor) -> None:
        sid = desc.scan_id
        if sid in self._by_id:
            raise ConflictError(f"descriptor store: scan {sid} already present")
        insort(self._ids, sid)
        self._by_id[sid] = desc.v
        self._matrix = None
        if self._path is not None:
            append_record(self._path, f"desc/{sid}", desc.v)

    def get(self, scan_id: int) -> GlobalDescriptor:
        sid = int(scan_id)
        if sid not in self._by_id:
            raise NotFoundError(f"descriptor store: no scan {sid}")
        return GlobalDescriptor(self._by_id[sid], sid)

    def _eligible_rows(self, query_id: int, exclusion: int):
        """Ids at most query_id - exclusion, with their stacked vectors."""
        cut = bisect_right(self._ids, query_id - exclusion)
        if cut == 0:
            return [], None
        if self._matrix is None:
            self._matrix = np.vstack([self._by_id[i] for i in self._ids])
        return self._ids[:cut], self._matrix[:cut]


def top_k(db: DescriptorDb, query, query_id: int, k: int, exclusion: int = 0) -> CandidateSet:
    """K nearest descriptors by affinity; ties prefer the smaller scan id."""
    if k < 1:
        raise ContractError(f"top_k: k must be positive, got {k}")
    if exclusion < 0:
        raise ContractError(f"top_k: exclusion must be non-negative, got {exclusion}")
    ids, rows = db._eligible_rows(query_id, exclusion)
    if not ids:
        return CandidateSet(query_id, (), k)
    q = _vec(query)
    if rows.shape[1] != q.shape[0]:
        raise DimensionError(f"top_k: query length {q.shape[0]} vs database {rows.shape[1]}")
    dists = np.sqrt(((rows - q) ** 2).sum(axis=1))
    # Max-heap of the best k seen so far; heap root is the current worst.
    heap: list[tuple[float, int]] = []
    for sid, d in zip(ids, dists):
        key = (-float(d), -sid)
        if len(heap) < k:
            heapq.heappush(heap, key)
        elif key > heap[0]:
            heapq.heapreplace(heap, key)
    best = sorted((-nd, -nid) for nd, nid in heap)
    return CandidateSet(query_id, tuple((sid, d) for d, sid in best), k)


def brute_force_knn(db: DescriptorDb, query, query_id: int, k: int, exclusion: int = 0) -> CandidateSet:
    """Oracle twin of top_k: per-entry affinity calls and a full sort."""
    if k < 1:
        raise ContractError(f"brute_force_knn: k must be positive, got {k}")
    scored = []
    for sid in db.ids():
        if sid > query_id - exclusion:
            continue
        scored.append((affinity(db.get(sid), query), sid))
    scored.sort()
    return CandidateSet(query_id, tuple((sid, d) for d, sid in scored[:k]), k)
