# SPDX-License-Identifier: GPL-3.0-only

import numpy as np
import pytest

from baselines import BaselineConfig
from errors import ArgumentError
from mof import MoFWeights
from pipeline import rerank_batch
from reranker_interfaces import BaseReranker, read_manifest
from rerankers import RERANKERS, MoFReranker, NoReranker, create_reranker


def _make(name, ds, **extra):
    kwargs = dict(graph=ds.graph, weights=MoFWeights.uniform(4, ds.db.dim), l=4)
    kwargs.update(extra)
    return create_reranker(name, ds.db, 6, baseline_cfg=BaselineConfig(k_neighbors=2, top_m=10), **kwargs)


class TestCreateReranker:
    @pytest.mark.parametrize("name", RERANKERS)
    def test_every_name_builds(self, small_synth, name):
        reranker = _make(name, small_synth)
        assert isinstance(reranker, BaseReranker)
        assert reranker.name == name

    def test_unknown_name(self, small_synth):
        with pytest.raises(ArgumentError, match="unknown reranker"):
            create_reranker("bm25", small_synth.db, 6)

    def test_mof_needs_weights(self, small_synth):
        with pytest.raises(ArgumentError, match="weights"):
            create_reranker("mof", small_synth.db, 6, graph=small_synth.graph, l=4)

    def test_adaptive_needs_graph(self, small_synth):
        with pytest.raises(ArgumentError, match="graph"):
            create_reranker("adaptive", small_synth.db, 6, l=4)

    def test_superglobal_top_m_checked_up_front(self, small_synth):
        with pytest.raises(ArgumentError, match="top_m"):
            create_reranker(
                "superglobal", small_synth.db, 6, baseline_cfg=BaselineConfig(top_m=10_000)
            )


class TestRerankers:
    def test_none_returns_baseline(self, small_synth):
        result = NoReranker(small_synth.db, 6).rerank(small_synth.queries[0])
        np.testing.assert_array_equal(result.reranked.indices, result.baseline.indices)

    @pytest.mark.parametrize("name", ["qe", "dba", "adaptive", "mof"])
    def test_batches_keep_query_order(self, small_synth, name):
        queries = small_synth.queries[:12]
        batch = _make(name, small_synth).rerank_batch(queries, threads=3)
        assert [r.query_id for r in batch] == [q.id for q in queries]
        assert batch.failures == []

    def test_superglobal_ranks_top_m(self, small_synth):
        result = _make("superglobal", small_synth).rerank(small_synth.queries[0])
        assert len(result.reranked) == 10
        assert len(result.baseline) == 6

    def test_mof_batch_matches_pipeline(self, small_synth):
        ds = small_synth
        weights = MoFWeights.uniform(4, ds.db.dim)
        direct = rerank_batch(ds.db, ds.graph, weights, ds.queries, 6, 4)
        wrapped = MoFReranker(ds.db, ds.graph, weights, 6, 4).rerank_batch(ds.queries)
        for a, b in zip(direct, wrapped):
            np.testing.assert_array_equal(a.reranked.indices, b.reranked.indices)

    def test_manifest_lists_every_reranker(self):
        assert tuple(read_manifest()["package"]["rerankers"].split(",")) == RERANKERS
