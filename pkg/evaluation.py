# SPDX-License-Identifier: GPL-3.0-only
"""Ground truth, Recall@K scoring and latency benchmarking."""

import math
import platform
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from constraints import ConstraintGraph
from errors import ArgumentError, DataError
from feature_store import CandidateList, FeatureMatrix, ImageMeta, QueryFeature, knn_search
from logutils import get_logger
from mof import MoFWeights
from pipeline import RerankResult, refine_and_sort, rerank

logger = get_logger(__name__)

DEFAULT_RECALL_KS = (1, 5, 10)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Sorted positive database indices per query id."""

    positives: Dict[str, np.ndarray]

    def __contains__(self, query_id: str) -> bool:
        return query_id in self.positives

    def __len__(self) -> int:
        return len(self.positives)

    def get(self, query_id: str) -> np.ndarray:
        if query_id not in self.positives:
            raise ArgumentError(f"no ground truth for query {query_id!r}")
        return self.positives[query_id]

    def labels(self, query_id: str, indices: np.ndarray) -> np.ndarray:
        """1 for each index that is a positive of ``query_id``, else 0."""
        return np.isin(indices, self.get(query_id)).astype(np.int64)

    def to_dict(self) -> dict:
        return {qid: [int(i) for i in idx] for qid, idx in self.positives.items()}


def _gps_or_fail(records: Sequence[ImageMeta], side: str) -> np.ndarray:
    missing = [r.id for r in records if r.gps is None]
    if missing:
        raise DataError(
            f"{side} record {missing[0]!r} has no GPS ({len(missing)} records missing)"
        )
    return np.array([r.gps for r in records], dtype=np.float64).reshape(-1, 2)


def build_ground_truth(
    query_meta: Sequence[ImageMeta], db_meta: Sequence[ImageMeta], epsilon_m: float
) -> GroundTruth:
    """Positives per query: database rows within ``epsilon_m`` planar meters (inclusive)."""
    if not epsilon_m >= 0:
        raise ArgumentError(f"epsilon_m={epsilon_m} must be >= 0")
    q_xy = _gps_or_fail(query_meta, "query")
    db_xy = _gps_or_fail(db_meta, "database")

    positives: Dict[str, np.ndarray] = {}
    if math.isinf(epsilon_m):
        every = np.arange(len(db_meta), dtype=np.int64)
        for record in query_meta:
            positives[record.id] = every
        return GroundTruth(positives)

    tree = cKDTree(db_xy) if len(db_meta) else None
    for record, xy in zip(query_meta, q_xy):
        if tree is None:
            positives[record.id] = np.zeros(0, dtype=np.int64)
            continue
        hits = np.asarray(tree.query_ball_point(xy, r=epsilon_m), dtype=np.int64)
        if hits.size:
            diff = db_xy[hits] - xy
            hits = hits[np.sqrt(np.sum(diff * diff, axis=1)) <= epsilon_m]
        positives[record.id] = np.sort(hits)
    empty = sum(1 for idx in positives.values() if idx.size == 0)
    logger.info(
        "Ground truth for %d queries at %.1f m (%d without positives)",
        len(positives),
        epsilon_m,
        empty,
    )
    return GroundTruth(positives)


@dataclass
class LatencyStats:
    mean_ns: float = 0.0
    p50_ns: float = 0.0
    p99_ns: float = 0.0
    samples: int = 0

    @classmethod
    def from_samples(cls, samples: Sequence[int]) -> "LatencyStats":
        if len(samples) == 0:
            return cls()
        values = np.asarray(samples, dtype=np.float64)
        return cls(
            mean_ns=float(values.mean()),
            p50_ns=float(np.percentile(values, 50)),
            p99_ns=float(np.percentile(values, 99)),
            samples=int(values.size),
        )

    def to_dict(self) -> dict:
        return {
            "mean_ns": self.mean_ns,
            "p50_ns": self.p50_ns,
            "p99_ns": self.p99_ns,
            "samples": self.samples,
        }


@dataclass
class LatencyReport:
    retrieval: LatencyStats
    refine: LatencyStats
    k: int
    l: int
    dim: int
    n_queries: int
    repetitions: int
    threads: int = 1
    hardware: str = field(default_factory=lambda: f"{platform.machine()} {platform.processor()}".strip())
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "retrieval": self.retrieval.to_dict(),
            "refine": self.refine.to_dict(),
            "k": self.k,
            "l": self.l,
            "dim": self.dim,
            "n_queries": self.n_queries,
            "repetitions": self.repetitions,
            "threads": self.threads,
            "hardware": self.hardware,
            "note": self.note,
        }


@dataclass
class EvalReport:
    recall_at: Dict[int, float]
    n_queries: int
    per_query_hits: List[dict] = field(default_factory=list)
    latency: Optional[LatencyReport] = None

    def to_dict(self, include_latency: bool = True) -> dict:
        payload = {
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "n_queries": self.n_queries,
            "per_query_hits": self.per_query_hits,
        }
        if include_latency and self.latency is not None:
            payload["latency"] = self.latency.to_dict()
        return payload


def _ranked(result: Union[CandidateList, RerankResult]) -> CandidateList:
    return result.reranked if isinstance(result, RerankResult) else result


def recall_at_k(
    results: Sequence[Union[CandidateList, RerankResult]],
    gt: GroundTruth,
    ks: Sequence[int] = DEFAULT_RECALL_KS,
) -> EvalReport:
    """Percentage of queries with at least one positive in their top-K.

    Queries whose positive set is empty count as misses. ``first_hit`` in the
    per-query records is 1-based, or None when no positive was retrieved.
    """
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ArgumentError(f"recall cutoffs must be positive, got {ks}")

    first_hits: List[Optional[int]] = []
    per_query: List[dict] = []
    for result in results:
        ranked = _ranked(result)
        labels = gt.labels(ranked.query_id, ranked.indices)
        hit = np.flatnonzero(labels)
        first = int(hit[0]) + 1 if hit.size else None
        first_hits.append(first)
        per_query.append({"query_id": ranked.query_id, "first_hit": first})

    n = len(first_hits)
    recall: Dict[int, float] = {}
    for k in ks:
        hits = sum(1 for f in first_hits if f is not None and f <= k)
        recall[k] = 100.0 * hits / n if n else 0.0
    return EvalReport(recall, n, per_query)


def latency_bench(
    db: FeatureMatrix,
    graph: ConstraintGraph,
    weights: MoFWeights,
    queries: Sequence[QueryFeature],
    k: int,
    l: int,
    repetitions: int = 10,
) -> LatencyReport:
    """Time retrieval and refine+sort separately, single-threaded.

    A warm-up pass builds the neighbor table and touches every code path
    before measuring.
    """
    if repetitions < 1:
        raise ArgumentError(f"repetitions={repetitions} must be >= 1")
    if not queries:
        raise ArgumentError("latency_bench needs at least one query")
    rerank(db, graph, weights, queries[0], k, l)
    table = graph.neighbor_table(l)

    retrieval_ns: List[int] = []
    refine_ns: List[int] = []
    for _ in range(repetitions):
        for q in queries:
            t0 = time.perf_counter_ns()
            baseline = knn_search(db, q, k)
            t1 = time.perf_counter_ns()
            refine_and_sort(db, table, weights, q, baseline)
            t2 = time.perf_counter_ns()
            retrieval_ns.append(t1 - t0)
            refine_ns.append(t2 - t1)

    report = LatencyReport(
        retrieval=LatencyStats.from_samples(retrieval_ns),
        refine=LatencyStats.from_samples(refine_ns),
        k=k,
        l=l,
        dim=db.dim,
        n_queries=len(queries),
        repetitions=repetitions,
    )
    logger.info(
        "Latency over %d samples: retrieval p50 %.0f ns, refine p50 %.0f ns",
        report.refine.samples,
        report.retrieval.p50_ns,
        report.refine.p50_ns,
    )
    return report
