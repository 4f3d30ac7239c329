"""Recall metrics and the coarse-to-fine evaluation loop.

Rankings are per-query lists of database ids, best first. Recall@N is
the fraction of loop-bearing queries whose true match appears in the top
N; Recall@1% sizes N per query as one percent of that query's eligible
database. The evaluation loop indexes a sequence, retrieves Top-K
candidates per query, re-ranks them with the overlap head, and reports
both rankings side by side.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .dataset import LoopLabels, ground_truth_loops
from .profiler import STAGE_SELECT, StageTimer
from .retrieval import top_k


def eligible_size(query_id: int, exclusion: int) -> int:
    """Number of database ids a query may match: 0 .. query_id - exclusion."""
    return max(0, query_id - exclusion + 1)


def recall_at_n(rankings, labels: LoopLabels, n: int) -> float:
    """Hit rate of the true-match set within the top n, over loop queries."""
    hits = 0
    queries = labels.loop_queries()
    if not queries:
        return 0.0
    for q in queries:
        ranked = rankings.get(q, ())
        if any(sid in labels.matches[q] for sid in list(ranked)[:n]):
            hits += 1
    return hits / len(queries)


def recall_at_one_percent(rankings, labels: LoopLabels) -> float:
    """Recall with a per-query depth of 1% of the eligible database."""
    hits = 0
    queries = labels.loop_queries()
    if not queries:
        return 0.0
    for q in queries:
        depth = max(1, math.ceil(0.01 * eligible_size(q, labels.exclusion)))
        ranked = rankings.get(q, ())
        if any(sid in labels.matches[q] for sid in list(ranked)[:depth]):
            hits += 1
    return hits / len(queries)


def random_baseline_recall(labels: LoopLabels) -> float:
    """Expected Recall@1 of a uniform random ranking over the eligible set."""
    queries = labels.loop_queries()
    if not queries:
        return 0.0
    rates = []
    for q in queries:
        size = eligible_size(q, labels.exclusion)
        rates.append(len(labels.matches[q]) / size if size else 0.0)
    return float(np.mean(rates))


class EvalReport:
    """Per-sequence metrics, match lists, and stage timings."""

    def __init__(
        self,
        sequence: str,
        n_scans: int,
        labels: LoopLabels,
        coarse_rankings: dict,
        fine_rankings: dict,
        final_matches: dict,
        overlap_calls: int,
        k: int,
        stage_stats,
    ):
        self.sequence = sequence
        self.n_scans = n_scans
        self.labels = labels
        self.coarse_rankings = coarse_rankings
        self.fine_rankings = fine_rankings
        self.final_matches = final_matches
        self.overlap_calls = overlap_calls
        self.k = k
        self.stage_stats = stage_stats
        self.coarse_recall = OrderedDict(
            (n, recall_at_n(coarse_rankings, labels, n)) for n in range(1, k + 1)
        )
        self.cf_recall = OrderedDict(
            (n, recall_at_n(fine_rankings, labels, n)) for n in range(1, k + 1)
        )
        self.recall_1pct = recall_at_one_percent(coarse_rankings, labels)
        self.random_r1 = random_baseline_recall(labels)

    @property
    def n_loop_queries(self) -> int:
        return len(self.labels.loop_queries())

    def metric_lines(self) -> list[str]:
        seq = self.sequence
        lines = [
            f"scans {seq} {self.n_scans}",
            f"loop_queries {seq} {self.n_loop_queries}",
            f"overlap_calls {seq} {self.overlap_calls}",
            f"coarse_recall_at_1 {seq} {self.coarse_recall[1]:.6f}",
            f"cf_recall_at_1 {seq} {self.cf_recall[1]:.6f}",
            f"coarse_recall_at_1pct {seq} {self.recall_1pct:.6f}",
            f"random_baseline_r1 {seq} {self.random_r1:.6f}",
        ]
        if self.k in self.coarse_recall:
            lines.append(f"coarse_recall_at_{self.k} {seq} {self.coarse_recall[self.k]:.6f}")
            lines.append(f"cf_recall_at_{self.k} {seq} {self.cf_recall[self.k]:.6f}")
        for name, s in self.stage_stats.items():
            lines.append(f"stage_mean_ms_{name} {seq} {s.mean_ms:.4f}")
        return lines

    def curve_table(self) -> str:
        """Gnuplot-friendly Recall@N table: N, coarse, coarse-to-fine."""
        rows = ["# n coarse cf"]
        for n in range(1, self.k + 1):
            rows.append(f"{n} {self.coarse_recall[n]:.6f} {self.cf_recall[n]:.6f}")
        return "\n".join(rows) + "\n"


def run_evaluation(
    model,
    clouds,
    poses,
    k: int | None = None,
    exclusion: int | None = None,
    d_true: float | None = None,
    sequence: str = "synth",
    jobs: int = 1,
    timer: StageTimer | None = None,
) -> EvalReport:
    """Index a sequence and run every query through both stages."""
    cfg = model.config
    k = cfg.top_k if k is None else k
    exclusion = cfg.exclusion if exclusion is None else exclusion
    d_true = cfg.d_true if d_true is None else d_true
    timer = timer if timer is not None else StageTimer()

    fdb, vdb = model.index_sequence(clouds, timer=timer, jobs=jobs)
    labels = ground_truth_loops(poses, d_true, exclusion)
    calls_before = model.overlap.overlap_calls

    # Recall@1% can need a deeper coarse list than the K handed to the
    # fine stage; one percent of the largest eligible set bounds it.
    deep_k = max(k, math.ceil(0.01 * len(clouds)))

    def process(q: int):
        with timer.stage(STAGE_SELECT):
            cands = top_k(vdb, vdb.get(q), q, k, exclusion)
        if len(cands) == 0:
            return q, None, None, None
        deep_ids = cands.ids()
        if deep_k > k:
            deep_ids = top_k(vdb, vdb.get(q), q, deep_k, exclusion).ids()
        decision = model.overlap.verify(fdb.get(q), cands, fdb, timer=timer)
        ranked_fine = [sid for sid, _ in sorted(decision.scores, key=lambda st: (-st[1], st[0]))]
        return q, deep_ids, ranked_fine, decision

    ids = range(len(clouds))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(process, ids))
    else:
        outcomes = [process(q) for q in ids]

    coarse_rankings: dict[int, list] = {}
    fine_rankings: dict[int, list] = {}
    final_matches: dict[int, tuple] = {}
    for q, deep_ids, ranked_fine, decision in outcomes:
        if deep_ids is None:
            continue
        coarse_rankings[q] = deep_ids
        fine_rankings[q] = ranked_fine
        final_matches[q] = (decision.best_id, decision.tau_best)

    return EvalReport(
        sequence,
        len(clouds),
        labels,
        coarse_rankings,
        fine_rankings,
        final_matches,
        model.overlap.overlap_calls - calls_before,
        k,
        timer.stats(),
    )
