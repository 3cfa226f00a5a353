# SPDX-License-Identifier: GPL-3.0-only
"""Database/query feature storage and exact flat-index retrieval."""

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from errors import ArgumentError, DataError, FeatureFormatError
from logutils import get_logger
from utils import check_index, write_jsonl

logger = get_logger(__name__)

FEATURE_MAGIC = b"EPFV"
FEATURE_VERSION = 1
# magic, version u32, N u64, D u32
_HEADER = struct.Struct("<4sIQI")

MIN_ROW_NORM = 1e-12
# Rows already this close to unit norm are not divided again, so refinement
# steps that reproduce a stored row also reproduce its distances exactly.
UNIT_NORM_TOL = 1e-6


def renormalize_rows(rows: np.ndarray) -> np.ndarray:
    """Scale each row of ``rows`` to unit L2 norm.

    Rows within ``UNIT_NORM_TOL`` of unit norm come back untouched. Rows with a
    norm below ``MIN_ROW_NORM`` also come back untouched; callers decide what
    a degenerate row means for them.
    """
    rows = np.asarray(rows)
    squeeze = rows.ndim == 1
    rows2d = np.atleast_2d(rows)
    norms = np.sqrt(np.sum(rows2d.astype(np.float64) ** 2, axis=1))
    scale = np.ones_like(norms)
    rescale = (np.abs(norms - 1.0) > UNIT_NORM_TOL) & (norms >= MIN_ROW_NORM)
    scale[rescale] = norms[rescale]
    out = rows2d / scale[:, None].astype(rows2d.dtype)
    return out[0] if squeeze else out


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """N x D row-major float32 matrix of unit-norm features.

    The array is marked read-only on construction; the matrix can be shared
    between threads freely.
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ArgumentError(f"feature data must be 2-D, got shape {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def count(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def __len__(self) -> int:
        return self.count

    def row(self, index: int) -> np.ndarray:
        return self.data[check_index(index, self.count)]

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "FeatureMatrix":
        """Normalize raw rows and build a matrix, rejecting zero-norm rows."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ArgumentError(f"rows must be 2-D, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(rows), axis=1))[0])
            raise DataError(f"row {bad} contains non-finite values")
        norms = np.sqrt(np.sum(rows**2, axis=1))
        degenerate = np.flatnonzero(norms < MIN_ROW_NORM)
        if degenerate.size:
            raise DataError(f"row {int(degenerate[0])} has zero norm")
        if rows.shape[0] == 0:
            return cls(rows.astype(np.float32))
        return cls((rows / norms[:, None]).astype(np.float32))


@dataclass(frozen=True, eq=False)
class QueryFeature:
    """One query vector (unit norm, float32) with an opaque id."""

    vector: np.ndarray
    id: str

    def __post_init__(self):
        vector = np.ascontiguousarray(self.vector, dtype=np.float32).reshape(-1)
        vector.setflags(write=False)
        object.__setattr__(self, "vector", vector)

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])

    @classmethod
    def from_vector(cls, vector: np.ndarray, query_id: str) -> "QueryFeature":
        """Build a query, normalizing unconditionally."""
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        norm = float(np.sqrt(np.sum(vector**2)))
        if not np.isfinite(norm) or norm < MIN_ROW_NORM:
            raise DataError(f"query {query_id!r} has zero or non-finite norm")
        return cls((vector / norm).astype(np.float32), str(query_id))


@dataclass(frozen=True, eq=False)
class CandidateList:
    """Ordered top-K retrieval result for one query."""

    query_id: str
    indices: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64))
        object.__setattr__(
            self, "distances", np.asarray(self.distances, dtype=np.float64)
        )

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    @property
    def entries(self) -> List[Tuple[int, float]]:
        return [(int(i), float(d)) for i, d in zip(self.indices, self.distances)]

    def to_dict(self) -> dict:
        return {
            "indices": [int(i) for i in self.indices],
            "distances": [float(d) for d in self.distances],
        }


@dataclass(frozen=True)
class ImageMeta:
    """One metadata record: id plus optional planar GPS and timestamp."""

    id: str
    gps: Optional[Tuple[float, float]] = None
    timestamp: Optional[float] = None
    split: Optional[str] = None

    def to_dict(self) -> dict:
        record = {"id": self.id}
        if self.gps is not None:
            record["gps"] = [float(self.gps[0]), float(self.gps[1])]
        if self.timestamp is not None:
            record["timestamp"] = float(self.timestamp)
        if self.split is not None:
            record["split"] = self.split
        return record


def _parse_meta(record: dict, lineno: int) -> ImageMeta:
    if not isinstance(record, dict) or not isinstance(record.get("id"), str):
        raise DataError(f"metadata line {lineno}: 'id' must be a string")
    gps = record.get("gps")
    if gps is not None:
        if not isinstance(gps, (list, tuple)) or len(gps) != 2:
            raise DataError(
                f"metadata line {lineno} ({record['id']}): 'gps' must be "
                "[easting_m, northing_m]"
            )
        gps = (float(gps[0]), float(gps[1]))
    timestamp = record.get("timestamp")
    if timestamp is not None:
        timestamp = float(timestamp)
    split = record.get("split")
    if split is not None and split not in ("train", "val", "test"):
        raise DataError(f"metadata line {lineno}: unknown split {split!r}")
    return ImageMeta(record["id"], gps, timestamp, split)


def load_metadata(path: Union[str, Path]) -> List[ImageMeta]:
    """Read the JSON-lines companion metadata file, one record per row."""
    path = Path(path)
    records: List[ImageMeta] = []
    try:
        with path.open(encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataError(f"metadata line {lineno} is not valid JSON: {e}")
                records.append(_parse_meta(raw, lineno))
    except FileNotFoundError:
        raise FileNotFoundError(f"Metadata file not found: {path}")
    return records


def save_metadata(path: Union[str, Path], records: List[ImageMeta]) -> None:
    write_jsonl(path, (record.to_dict() for record in records))


def load_features(path: Union[str, Path]) -> FeatureMatrix:
    """Read an EPFV feature file and return its rows at unit norm."""
    path = Path(path)
    logger.debug("Loading features from %s", path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"Feature file not found: {path}")

    if len(raw) < _HEADER.size:
        raise FeatureFormatError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, count, dim = _HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported format version {version}")
    if dim == 0:
        raise FeatureFormatError(f"{path}: feature dimension must be positive")
    expected = _HEADER.size + count * dim * 4
    if len(raw) != expected:
        raise FeatureFormatError(
            f"{path}: header declares {count}x{dim} floats ({expected} bytes) "
            f"but file has {len(raw)} bytes"
        )

    if count == 0:
        rows = np.zeros((0, dim), dtype=np.float32)
    else:
        rows = np.frombuffer(
            raw, dtype="<f4", count=count * dim, offset=_HEADER.size
        ).reshape(count, dim)
    matrix = FeatureMatrix.from_rows(rows)
    logger.info("Loaded %d features of dimension %d from %s", count, dim, path.name)
    return matrix


def save_features(path: Union[str, Path], matrix: Union[FeatureMatrix, np.ndarray]) -> None:
    data = matrix.data if isinstance(matrix, FeatureMatrix) else np.asarray(matrix)
    data = np.ascontiguousarray(data, dtype="<f4")
    with Path(path).open("wb") as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, data.shape[0], data.shape[1]))
        f.write(data.tobytes(order="C"))


def load_queries(
    features_path: Union[str, Path], metadata_path: Union[str, Path]
) -> Tuple[List[QueryFeature], List[ImageMeta]]:
    """Load a query bundle as QueryFeature objects keyed by metadata ids."""
    matrix = load_features(features_path)
    meta = load_metadata(metadata_path)
    if len(meta) != matrix.count:
        raise DataError(
            f"query metadata has {len(meta)} records but features have {matrix.count} rows"
        )
    queries = [QueryFeature(matrix.data[i], m.id) for i, m in enumerate(meta)]
    return queries, meta


def _as_vector(db: FeatureMatrix, q: Union[QueryFeature, np.ndarray]) -> np.ndarray:
    vector = q.vector if isinstance(q, QueryFeature) else np.asarray(q).reshape(-1)
    if vector.shape[0] != db.dim:
        raise ArgumentError(
            f"query dimension {vector.shape[0]} does not match database dimension {db.dim}"
        )
    return vector


def l2_distances(rows: np.ndarray, vector: np.ndarray) -> np.ndarray:
    """Euclidean distance from each row to ``vector``, accumulated in float64."""
    diff = np.asarray(rows, dtype=np.float64) - np.asarray(vector, dtype=np.float64)
    return np.sqrt(np.sum(diff * diff, axis=-1))


def top_k_order(distances: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest distances, ties broken by lower index."""
    n = distances.shape[0]
    if k < n:
        kth = np.partition(distances, k - 1)[k - 1]
        pool = np.flatnonzero(distances <= kth)
    else:
        pool = np.arange(n)
    return pool[np.argsort(distances[pool], kind="stable")][:k]


def knn_search(
    db: FeatureMatrix, q: Union[QueryFeature, np.ndarray], k: int
) -> CandidateList:
    """Exhaustive k-nearest-neighbor search by Euclidean distance.

    ``q`` may also be a raw vector; it is used as given (no normalization),
    which query expansion relies on.
    """
    vector = _as_vector(db, q)
    if k < 1 or k > db.count:
        raise ArgumentError(f"k={k} must be in [1, {db.count}]")
    distances = l2_distances(db.data, vector)
    order = top_k_order(distances, k)
    query_id = q.id if isinstance(q, QueryFeature) else ""
    return CandidateList(query_id, order, distances[order])


def knn_search_rows(
    db: FeatureMatrix, rows: np.ndarray, k: int, exclude_self: bool = False, block: int = 1024
) -> np.ndarray:
    """Top-k database neighbors for every database row index in ``rows``.

    Ordered by cosine similarity (equivalent to L2 on unit rows), lower index
    first on ties. With ``exclude_self`` a row never lists itself.
    """
    rows = np.asarray(rows, dtype=np.int64)
    limit = db.count - 1 if exclude_self else db.count
    if k < 0 or k > limit:
        raise ArgumentError(f"k={k} must be in [0, {limit}]")
    out = np.empty((rows.shape[0], k), dtype=np.int64)
    if k == 0 or rows.shape[0] == 0:
        return out
    base = db.data.astype(np.float64)
    for start in range(0, rows.shape[0], block):
        chunk = rows[start : start + block]
        sims = base[chunk] @ base.T
        if exclude_self:
            sims[np.arange(chunk.shape[0]), chunk] = -np.inf
        for r in range(chunk.shape[0]):
            out[start + r] = top_k_order(-sims[r], k)
    return out


def pairwise_similarity(db: FeatureMatrix, i: int, j: int) -> float:
    """Cosine similarity of two database rows, in [-1, 1]."""
    a = db.data[check_index(i, db.count)].astype(np.float64)
    b = db.data[check_index(j, db.count)].astype(np.float64)
    return float(np.clip(np.dot(a, b), -1.0, 1.0))
