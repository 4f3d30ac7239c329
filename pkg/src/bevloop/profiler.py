"""Wall-clock stage timing and end-to-end cost projection.

The pipeline charges work to five stages. Indexing stages are paid once
per scan; query stages are paid once per query, with one overlap
estimation per retained candidate. The projection formulas turn per-call
millisecond costs into total hours for a whole sequence, which is how a
coarse-to-fine budget is compared against exhaustive pairwise scoring.
"""

from __future__ import annotations

import threading
import time
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

STAGE_VOXELIZE = "voxelization"
STAGE_ENCODE = "bev_feature_extraction"
STAGE_DESCRIBE = "descriptor_generation"
STAGE_SELECT = "candidate_selection"
STAGE_OVERLAP = "overlap_estimation"

MS_PER_HOUR = 3.6e6


@dataclass(frozen=True)
class StageStats:
    mean_ms: float
    std_ms: float
    count: int
    total_ms: float


class StageTimer:
    """Accumulates per-stage wall-clock samples; safe under many writers."""

    def __init__(self):
        self._samples: "OrderedDict[str, list]" = OrderedDict()
        self._lock = threading.Lock()

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.record(name, (time.perf_counter() - t0) * 1e3)

    def record(self, name: str, ms: float) -> None:
        with self._lock:
            self._samples.setdefault(name, []).append(float(ms))

    def count(self, name: str) -> int:
        return len(self._samples.get(name, ()))

    def total_ms(self, name: str) -> float:
        return float(sum(self._samples.get(name, ())))

    def mean_ms(self, name: str) -> float:
        samples = self._samples.get(name)
        return float(np.mean(samples)) if samples else 0.0

    def stats(self) -> "OrderedDict[str, StageStats]":
        out: "OrderedDict[str, StageStats]" = OrderedDict()
        with self._lock:
            for name, samples in self._samples.items():
                arr = np.asarray(samples)
                out[name] = StageStats(
                    float(arr.mean()), float(arr.std()), len(samples), float(arr.sum())
                )
        return out

    def report_lines(self) -> list[str]:
        lines = []
        for name, s in self.stats().items():
            lines.append(f"{name} mean {s.mean_ms:.4f} ms std {s.std_ms:.4f} ms n {s.count}")
        return lines


def projected_cost_hours(
    n_scans: int,
    n_queries: int,
    vox_ms: float,
    feat_ms: float,
    desc_ms: float,
    select_ms: float,
    overlap_ms: float,
    k: int,
) -> float:
    """Total hours to index every scan and verify K candidates per query."""
    per_scan = vox_ms + feat_ms + desc_ms
    per_query = select_ms + k * overlap_ms
    return (n_scans * per_scan + n_queries * per_query) / MS_PER_HOUR


def exhaustive_cost_hours(
    n_scans: int,
    vox_ms: float,
    feat_ms: float,
    desc_ms: float,
    n_pairs: int,
    overlap_ms: float,
) -> float:
    """Total hours when every candidate pair gets an overlap estimation."""
    per_scan = vox_ms + feat_ms + desc_ms
    return (n_scans * per_scan + n_pairs * overlap_ms) / MS_PER_HOUR
