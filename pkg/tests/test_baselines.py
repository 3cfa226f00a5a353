# SPDX-License-Identifier: GPL-3.0-only

import numpy as np
import pytest

from baselines import (
    BaselineConfig,
    adaptive_mof_weights,
    adaptive_rerank,
    database_augmentation,
    query_expansion,
    superglobal_refine,
)
from constraints import build_matching_graph
from errors import ArgumentError, ConfigError
from feature_store import FeatureMatrix, QueryFeature, knn_search
from tests.conftest import random_unit_rows


class TestBaselineConfig:
    def test_defaults(self):
        cfg = BaselineConfig()
        assert (cfg.beta, cfg.k_neighbors, cfg.top_m) == (0.15, 5, 100)

    @pytest.mark.parametrize(
        "kwargs", [{"beta": -0.1}, {"beta": 1.5}, {"k_neighbors": -1}, {"top_m": 0}]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            BaselineConfig(**kwargs)


class TestQueryExpansion:
    def test_beta_one_equals_plain_retrieval(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            db = FeatureMatrix.from_rows(random_unit_rows(rng, 80, 8))
            q = QueryFeature.from_vector(rng.normal(size=8), f"q{seed}")
            expanded = query_expansion(db, q, BaselineConfig(beta=1.0, k_neighbors=3), 10)
            plain = knn_search(db, q, 10)
            np.testing.assert_array_equal(expanded.indices, plain.indices)
            assert expanded.query_id == q.id

    def test_expanded_vector_is_not_renormalized(self):
        db = FeatureMatrix.from_rows(np.array([[1.0, 0.0], [0.0, 1.0]]))
        q = QueryFeature.from_vector([1.0, 0.0], "q")
        result = query_expansion(db, q, BaselineConfig(beta=0.5, k_neighbors=2), 2)
        # 0.5 * [1, 0] + 0.5 * mean([1, 0], [0, 1]) = [0.75, 0.25]
        assert result.indices.tolist() == [0, 1]
        np.testing.assert_allclose(
            result.distances, [np.hypot(0.25, 0.25), np.hypot(0.75, 0.75)], atol=1e-7
        )

    def test_needs_neighbors(self):
        db = FeatureMatrix.from_rows(np.eye(3))
        with pytest.raises(ArgumentError):
            query_expansion(db, QueryFeature.from_vector([1, 0, 0], "q"), BaselineConfig(k_neighbors=0), 2)


class TestDatabaseAugmentation:
    def test_zero_neighbors_is_unchanged(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            db = FeatureMatrix.from_rows(random_unit_rows(rng, 40, 6))
            out = database_augmentation(db, BaselineConfig(k_neighbors=0))
            np.testing.assert_array_equal(out.data, db.data)

    def test_single_neighbor_example(self):
        rows = np.array([[1.0, 0.0], [0.0, 1.0], [0.7071, 0.7071]])
        db = FeatureMatrix.from_rows(rows)
        out = database_augmentation(db, BaselineConfig(k_neighbors=1))
        base = db.data.astype(np.float64)
        expected = base + base[[2, 2, 0]]
        expected /= np.linalg.norm(expected, axis=1, keepdims=True)
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_input_is_untouched(self, rng):
        db = FeatureMatrix.from_rows(random_unit_rows(rng, 30, 5))
        before = db.data.copy()
        database_augmentation(db, BaselineConfig(k_neighbors=3))
        np.testing.assert_array_equal(db.data, before)

    def test_applying_twice_differs(self, rng):
        db = FeatureMatrix.from_rows(random_unit_rows(rng, 30, 5))
        cfg = BaselineConfig(k_neighbors=3)
        once = database_augmentation(db, cfg)
        twice = database_augmentation(once, cfg)
        assert not np.allclose(once.data, twice.data)

    def test_blocking_does_not_change_output(self, rng):
        db = FeatureMatrix.from_rows(random_unit_rows(rng, 50, 5))
        cfg = BaselineConfig(k_neighbors=4)
        np.testing.assert_allclose(
            database_augmentation(db, cfg, block=7).data, database_augmentation(db, cfg).data, atol=1e-7
        )

    def test_k_must_be_below_n(self):
        with pytest.raises(ArgumentError, match="N=3"):
            database_augmentation(FeatureMatrix.from_rows(np.eye(3)), BaselineConfig(k_neighbors=3))


class TestSuperGlobal:
    def test_beta_zero_keeps_baseline(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            db = FeatureMatrix.from_rows(random_unit_rows(rng, 60, 8))
            q = QueryFeature.from_vector(rng.normal(size=8), "q")
            result = superglobal_refine(db, q, BaselineConfig(beta=0.0, top_m=20))
            np.testing.assert_array_equal(result.indices, knn_search(db, q, 20).indices)

    def test_output_is_subset_of_top_m(self, rng):
        db = FeatureMatrix.from_rows(random_unit_rows(rng, 100, 8))
        for i in range(20):
            q = QueryFeature.from_vector(rng.normal(size=8), f"q{i}")
            result = superglobal_refine(db, q, BaselineConfig(beta=0.5, top_m=15))
            assert sorted(result.indices) == sorted(knn_search(db, q, 15).indices)
            assert np.all(np.diff(result.distances) >= 0)

    def test_top_m_larger_than_database(self):
        db = FeatureMatrix.from_rows(np.eye(3))
        with pytest.raises(ArgumentError, match="top_m"):
            superglobal_refine(db, QueryFeature.from_vector([1, 0, 0], "q"), BaselineConfig(top_m=4))


class TestAdaptiveWeights:
    def test_identical_neighbors_are_uniform(self, rng):
        row = random_unit_rows(rng, 1, 6)[0]
        weights = adaptive_mof_weights(row, np.tile(row, (4, 1)))
        np.testing.assert_allclose(weights, np.full(4, 0.25), atol=1e-6)

    def test_sum_normalized_similarities(self):
        angle = np.arccos(0.1)
        feats = np.array([[0.9, np.sqrt(1 - 0.81)], [np.cos(angle), np.sin(angle)]])
        weights = adaptive_mof_weights(np.array([1.0, 0.0]), feats)
        np.testing.assert_allclose(weights, [0.9, 0.1], atol=1e-6)

    def test_orthogonal_neighbor(self):
        weights = adaptive_mof_weights(np.array([1.0, 0.0]), np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert weights[1] == pytest.approx(0.0, abs=1e-9)

    def test_negative_similarity_clamped(self):
        feats = np.array([[1.0, 0.0], [-1.0, 0.0]])
        clamped = adaptive_mof_weights(np.array([1.0, 0.0]), feats)
        assert clamped[1] == 0.0
        raw = adaptive_mof_weights(np.array([1.0, 0.0]), feats, clamp_negative=False)
        assert raw[1] < 0.0

    def test_non_negative_and_bounded(self, rng):
        for _ in range(50):
            q = np.abs(rng.normal(size=5))
            feats = np.abs(rng.normal(size=(4, 5)))
            weights = adaptive_mof_weights(q, feats)
            assert np.all(weights >= 0)
            assert weights.sum() <= 1 + 1e-6

    def test_adaptive_rerank_is_permutation(self, small_synth):
        ds = small_synth
        for q in ds.queries[:20]:
            result = adaptive_rerank(ds.db, ds.graph, q, 6, 4)
            assert sorted(result.reranked.indices) == sorted(result.baseline.indices)

    def test_adaptive_rerank_on_padded_graph_keeps_order(self, rng):
        db = FeatureMatrix.from_rows(random_unit_rows(rng, 40, 6))
        graph = build_matching_graph([], 0.5, n=40)
        q = QueryFeature.from_vector(rng.normal(size=6), "q")
        result = adaptive_rerank(db, graph, q, 8, 3)
        np.testing.assert_array_equal(result.reranked.indices, result.baseline.indices)
