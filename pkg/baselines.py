# SPDX-License-Identifier: GPL-3.0-only
"""Global-feature re-ranking baselines: QE, DBA, SuperGlobal-style, adaptive MoF."""

import time
from dataclasses import dataclass

import numpy as np

from constraints import ConstraintGraph
from errors import ArgumentError, ConfigError
from feature_store import (
    MIN_ROW_NORM,
    CandidateList,
    FeatureMatrix,
    QueryFeature,
    knn_search,
    knn_search_rows,
    l2_distances,
    renormalize_rows,
)
from logutils import get_logger
from mof import MoFWeights, refine
from pipeline import RerankResult, sort_by_distance

logger = get_logger(__name__)

ADAPTIVE_EPS = 1e-8


@dataclass(frozen=True)
class BaselineConfig:
    beta: float = 0.15
    k_neighbors: int = 5
    top_m: int = 100

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta={self.beta} must be in [0, 1]")
        if self.k_neighbors < 0:
            raise ConfigError(f"k_neighbors={self.k_neighbors} must be >= 0")
        if self.top_m < 1:
            raise ConfigError(f"top_m={self.top_m} must be >= 1")


def query_expansion(
    db: FeatureMatrix, q: QueryFeature, cfg: BaselineConfig, top_n: int
) -> CandidateList:
    """Second retrieval with ``beta * q + (1 - beta) * mean(top-k neighbors)``.

    The expanded query is not renormalized.
    """
    if cfg.k_neighbors < 1:
        raise ArgumentError("query expansion needs k_neighbors >= 1")
    first = knn_search(db, q, cfg.k_neighbors)
    mean = db.data[first.indices].astype(np.float64).mean(axis=0)
    expanded = cfg.beta * q.vector.astype(np.float64) + (1.0 - cfg.beta) * mean
    second = knn_search(db, expanded, top_n)
    return CandidateList(q.id, second.indices, second.distances)


def database_augmentation(
    db: FeatureMatrix, cfg: BaselineConfig, block: int = 1024
) -> FeatureMatrix:
    """Replace each row by the mean of itself and its k nearest other rows.

    Rows are renormalized afterwards; a row whose mean vanishes keeps its
    original value. The input matrix is not modified.
    """
    k = cfg.k_neighbors
    if k >= max(db.count, 1):
        raise ArgumentError(f"k_neighbors={k} must be smaller than N={db.count}")
    if k == 0:
        return FeatureMatrix(db.data.copy())

    base = db.data.astype(np.float64)
    neighbors = knn_search_rows(db, np.arange(db.count), k, exclude_self=True, block=block)
    augmented = np.empty_like(base)
    for start in range(0, db.count, block):
        stop = min(start + block, db.count)
        gathered = base[neighbors[start:stop]].sum(axis=1)
        augmented[start:stop] = (base[start:stop] + gathered) / (k + 1)
    norms = np.sqrt(np.sum(augmented * augmented, axis=1))
    vanished = norms < MIN_ROW_NORM
    augmented = renormalize_rows(augmented)
    augmented[vanished] = base[vanished]
    logger.info("Augmented %d database rows with k=%d neighbors", db.count, k)
    return FeatureMatrix(augmented.astype(np.float32))


def superglobal_refine(
    db: FeatureMatrix, q: QueryFeature, cfg: BaselineConfig
) -> CandidateList:
    """Approximate SuperGlobal-style refinement of the top-M candidates.

    Each candidate becomes ``(1 - beta) * f_c + beta * mean(k nearest rows)``,
    renormalized, and the top-M list is re-ranked by distance to ``q``.
    """
    if cfg.top_m > db.count:
        raise ArgumentError(f"top_m={cfg.top_m} exceeds database size {db.count}")
    baseline = knn_search(db, q, cfg.top_m)
    candidates = db.data[baseline.indices].astype(np.float64)
    if cfg.k_neighbors > 0:
        neighbors = knn_search_rows(db, baseline.indices, cfg.k_neighbors, exclude_self=True)
        context = db.data[neighbors].astype(np.float64).mean(axis=1)
        mixed = (1.0 - cfg.beta) * candidates + cfg.beta * context
        norms = np.sqrt(np.sum(mixed * mixed, axis=1))
        refined = renormalize_rows(mixed)
        refined[norms < MIN_ROW_NORM] = candidates[norms < MIN_ROW_NORM]
    else:
        refined = candidates
    return sort_by_distance(q.id, baseline, l2_distances(refined, q.vector))


def adaptive_mof_weights(
    query: np.ndarray, neighbor_feats: np.ndarray, clamp_negative: bool = True
) -> np.ndarray:
    """Per-neighbor weights proportional to cosine similarity with the query.

    Negative similarities are clamped to zero unless ``clamp_negative`` is off.
    """
    feats = np.asarray(neighbor_feats, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    norms = np.sqrt(np.sum(feats * feats, axis=1)) * np.sqrt(np.sum(q * q))
    sims = feats @ q / (norms + ADAPTIVE_EPS)
    if clamp_negative:
        sims = np.maximum(sims, 0.0)
    return sims / (np.sum(sims) + ADAPTIVE_EPS)


def adaptive_rerank(
    db: FeatureMatrix,
    graph: ConstraintGraph,
    q: QueryFeature,
    k: int,
    l: int,
    clamp_negative: bool = True,
) -> RerankResult:
    """Re-rank with MoF weights computed per candidate from query similarity."""
    baseline = knn_search(db, q, k)
    table = graph.neighbor_table(l)
    start = time.perf_counter_ns()
    refined = np.empty((k, db.dim), dtype=np.float64)
    for row, candidate in enumerate(baseline.indices):
        feats = db.data[table[candidate]]
        w = adaptive_mof_weights(q.vector, feats, clamp_negative)
        refined[row] = refine(MoFWeights(w[:, None], mode="scalar"), feats)
    reranked = sort_by_distance(q.id, baseline, l2_distances(refined, q.vector))
    return RerankResult(q.id, baseline, reranked, time.perf_counter_ns() - start)
