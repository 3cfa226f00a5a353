# SPDX-License-Identifier: GPL-3.0-only

import numpy as np
import pytest

from feature_store import FeatureMatrix, ImageMeta, QueryFeature
from synthetic import SynthSpec, generate_synthetic


def random_unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    rows = rng.normal(size=(n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def brute_force_knn(db: FeatureMatrix, vector: np.ndarray, k: int) -> np.ndarray:
    """Naive oracle: full sort by (distance, index)."""
    data = db.data.astype(np.float64)
    v = np.asarray(vector, dtype=np.float64)
    dists = [float(np.sqrt(np.sum((row - v) ** 2))) for row in data]
    return np.array(sorted(range(len(dists)), key=lambda i: (dists[i], i))[:k])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_db():
    def _make(rng: np.random.Generator, n: int, dim: int) -> FeatureMatrix:
        return FeatureMatrix.from_rows(random_unit_rows(rng, n, dim))

    return _make


@pytest.fixture
def make_query():
    def _make(rng: np.random.Generator, dim: int, query_id: str = "q") -> QueryFeature:
        return QueryFeature.from_vector(rng.normal(size=dim), query_id)

    return _make


@pytest.fixture
def line_meta():
    """Three records on the x axis at 0, 10 and 100 meters."""
    return [
        ImageMeta("a", (0.0, 0.0), 0.0),
        ImageMeta("b", (10.0, 0.0), 1.5),
        ImageMeta("c", (100.0, 0.0), 5.0),
    ]


@pytest.fixture(scope="session")
def small_synth():
    spec = SynthSpec(
        n_places=12,
        views_per_place=4,
        dim=16,
        distractor_count=6,
        queries_per_place=10,
        k=6,
        l=4,
        min_gain=1.0,
        seed=3,
    )
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def default_synth():
    return generate_synthetic(SynthSpec())
