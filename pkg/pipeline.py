# SPDX-License-Identifier: GPL-3.0-only
"""End-to-end inference: retrieve top-K, refine candidates, re-rank."""

import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from constraints import ConstraintGraph
from errors import ArgumentError, DataError
from feature_store import CandidateList, FeatureMatrix, QueryFeature, knn_search, l2_distances
from logutils import get_logger
from mof import MoFWeights, refine_many
from utils import dumps_compact, read_jsonl, write_jsonl

logger = get_logger(__name__)


@dataclass(frozen=True, eq=False)
class RerankResult:
    query_id: str
    baseline: CandidateList
    reranked: CandidateList
    refine_time_ns: int = 0

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "baseline": self.baseline.to_dict(),
            "reranked": self.reranked.to_dict(),
            "refine_time_ns": int(self.refine_time_ns),
        }


@dataclass
class BatchResult:
    """Successful results in input order plus the (query_id, error) pairs that failed."""

    results: List[RerankResult] = field(default_factory=list)
    failures: List[Tuple[str, str]] = field(default_factory=list)

    def __iter__(self) -> Iterator[RerankResult]:
        return iter(self.results)

    def __len__(self) -> int:
        return len(self.results)

    def __getitem__(self, index: int) -> RerankResult:
        return self.results[index]


def sort_by_distance(
    query_id: str, baseline: CandidateList, distances: np.ndarray
) -> CandidateList:
    """Order the baseline candidates by ``distances``, baseline rank breaking ties."""
    order = np.lexsort((np.arange(distances.shape[0]), distances))
    return CandidateList(query_id, baseline.indices[order], distances[order])


def refine_and_sort(
    db: FeatureMatrix,
    table: np.ndarray,
    weights: MoFWeights,
    q: QueryFeature,
    baseline: CandidateList,
) -> CandidateList:
    """Gather each candidate's neighbor row from ``table``, refine it and re-rank."""
    feats = db.data[table[baseline.indices]]
    refined, _, _ = refine_many(weights, feats)
    return sort_by_distance(q.id, baseline, l2_distances(refined, q.vector))


def _check_inputs(
    db: FeatureMatrix, graph: ConstraintGraph, weights: MoFWeights, l: int
) -> None:
    if l != weights.l:
        raise ArgumentError(f"l={l} does not match the weights' {weights.l} neighbor rows")
    if not weights.accepts_dim(db.dim):
        raise ArgumentError(
            f"weights have {weights.dim} columns but features have dimension {db.dim}"
        )
    if graph.n != db.count:
        raise ArgumentError(
            f"constraint graph covers {graph.n} nodes but the database has {db.count} rows"
        )


def rerank(
    db: FeatureMatrix,
    graph: ConstraintGraph,
    weights: MoFWeights,
    q: QueryFeature,
    k: int,
    l: int,
) -> RerankResult:
    """Re-rank the top-``k`` candidates of ``q`` by distance to their refined features.

    ``refine_time_ns`` covers gathering, refinement and sorting only; retrieval
    and neighbor-table construction are excluded.
    """
    _check_inputs(db, graph, weights, l)
    baseline = knn_search(db, q, k)
    table = graph.neighbor_table(l)
    start = time.perf_counter_ns()
    reranked = refine_and_sort(db, table, weights, q, baseline)
    elapsed = time.perf_counter_ns() - start
    return RerankResult(q.id, baseline, reranked, elapsed)


def run_batch(
    fn: Callable[[QueryFeature], RerankResult],
    queries: Sequence[QueryFeature],
    threads: int = 1,
) -> BatchResult:
    """Apply ``fn`` to every query, optionally on a thread pool.

    Per-query errors are logged and collected; the batch continues.
    """

    def _guarded(q: QueryFeature) -> Tuple[Optional[RerankResult], Optional[str]]:
        try:
            return fn(q), None
        except Exception as e:
            return None, f"{type(e).__name__}: {e}"

    if threads > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            outcomes = list(executor.map(_guarded, queries))
    else:
        outcomes = [_guarded(q) for q in queries]

    batch = BatchResult()
    for q, (result, error) in zip(queries, outcomes):
        if error is not None:
            logger.warning("Query %s failed: %s", q.id, error)
            batch.failures.append((q.id, error))
        else:
            batch.results.append(result)
    return batch


def rerank_batch(
    db: FeatureMatrix,
    graph: ConstraintGraph,
    weights: MoFWeights,
    queries: Sequence[QueryFeature],
    k: int,
    l: int,
    threads: int = 1,
) -> BatchResult:
    """``rerank`` over many queries; output order matches input order."""
    _check_inputs(db, graph, weights, l)
    graph.neighbor_table(l)
    return run_batch(lambda q: rerank(db, graph, weights, q, k, l), queries, threads)


def write_results(path: Union[str, Path], results: Sequence[RerankResult]) -> int:
    """Export results as JSON lines, one query per line."""
    count = write_jsonl(path, (r.to_dict() for r in results))
    logger.info("Wrote %d re-ranking results to %s", count, path)
    return count


def results_digest(results: Sequence[RerankResult]) -> str:
    """SHA-256 of the exported results with timings left out."""
    digest = hashlib.sha256()
    for result in results:
        record = result.to_dict()
        del record["refine_time_ns"]
        digest.update((dumps_compact(record) + "\n").encode("utf-8"))
    return digest.hexdigest()


def _candidates(query_id: str, payload: dict) -> CandidateList:
    return CandidateList(query_id, payload["indices"], payload["distances"])


def read_results(path: Union[str, Path]) -> List[RerankResult]:
    """Inverse of ``write_results``."""
    results = []
    for record in read_jsonl(path):
        try:
            query_id = record["query_id"]
            results.append(
                RerankResult(
                    query_id,
                    _candidates(query_id, record["baseline"]),
                    _candidates(query_id, record["reranked"]),
                    int(record.get("refine_time_ns", 0)),
                )
            )
        except (KeyError, TypeError) as e:
            raise DataError(f"{path}: malformed result record: {e}") from e
    return results
