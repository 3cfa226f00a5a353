# SPDX-License-Identifier: GPL-3.0-only

import time
from typing import Sequence

from baselines import (
    BaselineConfig,
    adaptive_rerank,
    database_augmentation,
    query_expansion,
    superglobal_refine,
)
from constraints import ConstraintGraph
from errors import ArgumentError
from feature_store import FeatureMatrix, QueryFeature, knn_search
from logutils import get_logger
from mof import MoFWeights
from pipeline import BatchResult, RerankResult, rerank, rerank_batch
from reranker_interfaces import BaseReranker
from utils import require

logger = get_logger(__name__)

RERANKERS = ("none", "qe", "dba", "superglobal", "adaptive", "mof")


class NoReranker(BaseReranker):
    """Plain retrieval; the re-ranked list is the baseline."""

    name = "none"

    def __init__(self, db: FeatureMatrix, k: int):
        self.db = db
        self.k = k

    def rerank(self, q: QueryFeature) -> RerankResult:
        baseline = knn_search(self.db, q, self.k)
        return RerankResult(q.id, baseline, baseline, 0)


class QueryExpansionReranker(BaseReranker):
    name = "qe"

    def __init__(self, db: FeatureMatrix, k: int, cfg: BaselineConfig):
        self.db = db
        self.k = k
        self.cfg = cfg

    def rerank(self, q: QueryFeature) -> RerankResult:
        baseline = knn_search(self.db, q, self.k)
        start = time.perf_counter_ns()
        expanded = query_expansion(self.db, q, self.cfg, self.k)
        return RerankResult(q.id, baseline, expanded, time.perf_counter_ns() - start)


class DatabaseAugmentationReranker(BaseReranker):
    """Retrieval against a database augmented once at construction."""

    name = "dba"

    def __init__(self, db: FeatureMatrix, k: int, cfg: BaselineConfig):
        self.db = db
        self.k = k
        self.augmented = database_augmentation(db, cfg)

    def rerank(self, q: QueryFeature) -> RerankResult:
        baseline = knn_search(self.db, q, self.k)
        start = time.perf_counter_ns()
        augmented = knn_search(self.augmented, q, self.k)
        return RerankResult(q.id, baseline, augmented, time.perf_counter_ns() - start)


class SuperGlobalReranker(BaseReranker):
    """Top-M refinement; the re-ranked list holds all M refined candidates."""

    name = "superglobal"

    def __init__(self, db: FeatureMatrix, k: int, cfg: BaselineConfig):
        if cfg.top_m > db.count:
            raise ArgumentError(f"top_m={cfg.top_m} exceeds database size {db.count}")
        self.db = db
        self.k = k
        self.cfg = cfg

    def rerank(self, q: QueryFeature) -> RerankResult:
        baseline = knn_search(self.db, q, self.k)
        start = time.perf_counter_ns()
        refined = superglobal_refine(self.db, q, self.cfg)
        return RerankResult(q.id, baseline, refined, time.perf_counter_ns() - start)


class AdaptiveMoFReranker(BaseReranker):
    name = "adaptive"

    def __init__(
        self,
        db: FeatureMatrix,
        graph: ConstraintGraph,
        k: int,
        l: int,
        clamp_negative: bool = True,
    ):
        self.db = db
        self.graph = graph
        self.k = k
        self.l = l
        self.clamp_negative = clamp_negative

    def rerank(self, q: QueryFeature) -> RerankResult:
        return adaptive_rerank(self.db, self.graph, q, self.k, self.l, self.clamp_negative)


class MoFReranker(BaseReranker):
    """Learned MoF refinement of the top-K candidates."""

    name = "mof"

    def __init__(
        self, db: FeatureMatrix, graph: ConstraintGraph, weights: MoFWeights, k: int, l: int
    ):
        self.db = db
        self.graph = graph
        self.weights = weights
        self.k = k
        self.l = l

    def rerank(self, q: QueryFeature) -> RerankResult:
        return rerank(self.db, self.graph, self.weights, q, self.k, self.l)

    def rerank_batch(self, queries: Sequence[QueryFeature], threads: int = 1) -> BatchResult:
        return rerank_batch(
            self.db, self.graph, self.weights, queries, self.k, self.l, threads
        )


def create_reranker(name: str, db: FeatureMatrix, k: int, **kwargs) -> BaseReranker:
    """Build the reranker called ``name``.

    ``qe``, ``dba`` and ``superglobal`` read ``baseline_cfg``; ``adaptive``
    needs ``graph`` and ``l``; ``mof`` needs ``graph``, ``weights`` and ``l``.
    """
    baseline_cfg: BaselineConfig = kwargs.get("baseline_cfg") or BaselineConfig()
    if name == "none":
        reranker: BaseReranker = NoReranker(db, k)
    elif name == "qe":
        reranker = QueryExpansionReranker(db, k, baseline_cfg)
    elif name == "dba":
        reranker = DatabaseAugmentationReranker(db, k, baseline_cfg)
    elif name == "superglobal":
        reranker = SuperGlobalReranker(db, k, baseline_cfg)
    elif name == "adaptive":
        graph, l = require(kwargs, "graph", "l")
        reranker = AdaptiveMoFReranker(db, graph, k, l, kwargs.get("clamp_negative", True))
    elif name == "mof":
        graph, weights, l = require(kwargs, "graph", "weights", "l")
        reranker = MoFReranker(db, graph, weights, k, l)
    else:
        raise ArgumentError(f"unknown reranker {name!r}; expected one of {RERANKERS}")
    logger.info("Using %s reranker with k=%d", name, k)
    return reranker
