# SPDX-License-Identifier: GPL-3.0-only
"""Embodied-constraint graphs over database images and neighbor selection.

Four kinds of graph are supported. ``gps`` links images whose planar positions
are within ``epsilon_m`` metres, ``timestamp`` links frames close in time,
``matching`` links pairs whose local-feature inlier ratio exceeds ``sigma``,
and ``selfsim`` links pairs whose global features are similar but not
duplicates. Graphs are stored CSR-style with each node's neighbors already in
selection order (strength descending, index ascending).
"""

import csv
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from errors import ArgumentError, DataError
from feature_store import FeatureMatrix, ImageMeta
from logutils import get_logger
from utils import check_index

logger = get_logger(__name__)

CONSTRAINT_KINDS = ("gps", "timestamp", "matching", "selfsim")

# Cosine at or above this counts as a duplicate for the selfsim "1 > M" bound.
DUPLICATE_COSINE = 1.0 - 1e-6


@dataclass(frozen=True)
class MatchStats:
    i: int
    j: int
    inliers: int
    total: int


@dataclass(frozen=True)
class NeighborSet:
    candidate: int
    neighbors: Tuple[int, ...]
    padded: bool

    def __len__(self) -> int:
        return len(self.neighbors)


@dataclass(frozen=True, eq=False)
class ConstraintGraph:
    """Sparse symmetric adjacency for one constraint kind.

    ``indices[indptr[i]:indptr[i + 1]]`` are the neighbors of node ``i`` in
    selection order and ``strengths`` holds the matching scores. ``ambiguous``
    lists (i, j) pairs, i < j, that fell in the timestamp margin band.
    """

    kind: str
    n: int
    indptr: np.ndarray
    indices: np.ndarray
    strengths: np.ndarray
    params: Dict[str, float]
    ambiguous: np.ndarray = field(
        default_factory=lambda: np.empty((0, 2), dtype=np.int64)
    )
    _tables: Dict[int, np.ndarray] = field(
        default_factory=dict, init=False, repr=False, compare=False
    )
    _lock: threading.Lock = field(
        default_factory=threading.Lock, init=False, repr=False, compare=False
    )

    @property
    def edge_count(self) -> int:
        """Number of undirected edges."""
        return int(self.indices.shape[0] // 2)

    def degree(self, node: int) -> int:
        node = check_index(node, self.n, "node")
        return int(self.indptr[node + 1] - self.indptr[node])

    def neighbors(self, node: int) -> List[Tuple[int, float]]:
        node = check_index(node, self.n, "node")
        lo, hi = self.indptr[node], self.indptr[node + 1]
        return [
            (int(j), float(s)) for j, s in zip(self.indices[lo:hi], self.strengths[lo:hi])
        ]

    def to_sparse(self) -> sparse.csr_matrix:
        """Structure of the graph as a boolean CSR matrix."""
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        return sparse.csr_matrix(
            (np.ones(rows.shape[0], dtype=bool), (rows, self.indices)),
            shape=(self.n, self.n),
        )

    def is_symmetric(self) -> bool:
        adjacency = self.to_sparse()
        return (adjacency != adjacency.T).nnz == 0

    def neighbor_table(self, l: int) -> np.ndarray:
        """N x l matrix whose row i equals ``select_neighbors(self, i, l).neighbors``."""
        if l < 1:
            raise ArgumentError(f"l={l} must be >= 1")
        table = self._tables.get(l)
        if table is not None:
            return table
        with self._lock:
            table = self._tables.get(l)
            if table is None:
                table = _build_table(self, l)
                table.setflags(write=False)
                self._tables[l] = table
        return table

    def to_json(self) -> str:
        adjacency = [
            [[j, s] for j, s in self.neighbors(i)] for i in range(self.n)
        ]
        payload = {
            "kind": self.kind,
            "n": self.n,
            "params": self.params,
            "adjacency": adjacency,
            "ambiguous": self.ambiguous.tolist(),
        }
        return json.dumps(payload, separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ConstraintGraph":
        payload = json.loads(text)
        n = int(payload["n"])
        rows, cols, vals = [], [], []
        for i, entries in enumerate(payload["adjacency"]):
            for j, s in entries:
                if i < j:
                    rows.append(i)
                    cols.append(int(j))
                    vals.append(float(s))
        ambiguous = np.asarray(payload.get("ambiguous", []), dtype=np.int64).reshape(-1, 2)
        return _from_pairs(
            payload["kind"],
            n,
            np.asarray(rows, dtype=np.int64),
            np.asarray(cols, dtype=np.int64),
            np.asarray(vals, dtype=np.float64),
            payload.get("params", {}),
            ambiguous,
        )


def _build_table(graph: ConstraintGraph, l: int) -> np.ndarray:
    n = graph.n
    table = np.empty((n, l), dtype=np.int64)
    table[:, 0] = np.arange(n)
    if l == 1 or n == 0:
        return table
    slots = np.arange(l - 1)
    starts = graph.indptr[:-1]
    degrees = np.diff(graph.indptr)
    positions = starts[:, None] + slots[None, :]
    filled = slots[None, :] < degrees[:, None]
    safe = np.where(filled, positions, 0)
    gathered = graph.indices[safe] if graph.indices.size else np.zeros_like(safe)
    table[:, 1:] = np.where(filled, gathered, table[:, :1])
    return table


def _from_pairs(
    kind: str,
    n: int,
    rows: np.ndarray,
    cols: np.ndarray,
    strengths: np.ndarray,
    params: Dict[str, float],
    ambiguous: Optional[np.ndarray] = None,
) -> ConstraintGraph:
    """Symmetrize undirected (row < col) pairs into a ranked CSR layout."""
    src = np.concatenate([rows, cols]).astype(np.int64)
    dst = np.concatenate([cols, rows]).astype(np.int64)
    vals = np.concatenate([strengths, strengths]).astype(np.float64)
    # node ascending, strength descending, neighbor index ascending
    order = np.lexsort((dst, -vals, src))
    src, dst, vals = src[order], dst[order], vals[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
    if ambiguous is None:
        ambiguous = np.empty((0, 2), dtype=np.int64)
    graph = ConstraintGraph(
        kind=kind,
        n=n,
        indptr=indptr,
        indices=dst,
        strengths=vals,
        params=dict(params),
        ambiguous=np.asarray(ambiguous, dtype=np.int64).reshape(-1, 2),
    )
    logger.info(
        "Built %s graph: %d nodes, %d edges, %d ambiguous pairs",
        kind,
        n,
        graph.edge_count,
        graph.ambiguous.shape[0],
    )
    return graph


def _gps_array(meta: Sequence[ImageMeta]) -> np.ndarray:
    for record in meta:
        if record.gps is None:
            raise DataError(f"record {record.id!r} has no gps field")
    if not meta:
        return np.empty((0, 2), dtype=np.float64)
    return np.asarray([record.gps for record in meta], dtype=np.float64)


def build_gps_graph(meta: Sequence[ImageMeta], epsilon_m: float) -> ConstraintGraph:
    """Link images whose planar GPS positions are at most ``epsilon_m`` apart."""
    if epsilon_m < 0:
        raise ArgumentError(f"epsilon_m={epsilon_m} must be non-negative")
    points = _gps_array(meta)
    n = points.shape[0]
    if n >= 2:
        pairs = cKDTree(points).query_pairs(r=epsilon_m, output_type="ndarray")
    else:
        pairs = np.empty((0, 2), dtype=np.int64)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    dist = np.sqrt(np.sum((points[pairs[:, 0]] - points[pairs[:, 1]]) ** 2, axis=1))
    keep = dist <= epsilon_m
    return _from_pairs(
        "gps",
        n,
        pairs[keep, 0],
        pairs[keep, 1],
        0.0 - dist[keep],
        {"epsilon_m": float(epsilon_m)},
    )


def build_timestamp_graph(
    meta: Sequence[ImageMeta], t: float, t_margin: float
) -> ConstraintGraph:
    """Link frames with ``|t_i - t_j| <= t``; record the ``(t, t + t_margin]`` band as ambiguous."""
    if t <= 0:
        raise ArgumentError(f"t={t} must be positive")
    if t_margin < 0:
        raise ArgumentError(f"t_margin={t_margin} must be non-negative")
    for record in meta:
        if record.timestamp is None:
            raise DataError(f"record {record.id!r} has no timestamp field")
    stamps = np.asarray([record.timestamp for record in meta], dtype=np.float64)
    n = stamps.shape[0]

    order = np.argsort(stamps, kind="stable")
    ordered = stamps[order]
    reach = t + t_margin
    # slightly widened window; pairs are classified on the exact difference below
    upper = np.searchsorted(ordered, ordered + reach + 1e-9 * max(1.0, reach), side="right")

    edge_i, edge_j, edge_s, amb = [], [], [], []
    for pos in range(n):
        others = order[pos + 1 : upper[pos]]
        if others.size == 0:
            continue
        a = int(order[pos])
        delta = np.abs(stamps[others] - stamps[a])
        lo = np.minimum(others, a)
        hi = np.maximum(others, a)
        linked = delta <= t
        margin = (~linked) & (delta <= reach)
        edge_i.append(lo[linked])
        edge_j.append(hi[linked])
        edge_s.append(0.0 - delta[linked])
        amb.append(np.stack([lo[margin], hi[margin]], axis=1))

    def _cat(parts, dtype):
        return np.concatenate(parts).astype(dtype) if parts else np.empty(0, dtype=dtype)

    ambiguous = np.concatenate(amb) if amb else np.empty((0, 2), dtype=np.int64)
    if ambiguous.size:
        ambiguous = ambiguous[np.lexsort((ambiguous[:, 1], ambiguous[:, 0]))]
    return _from_pairs(
        "timestamp",
        n,
        _cat(edge_i, np.int64),
        _cat(edge_j, np.int64),
        _cat(edge_s, np.float64),
        {"t": float(t), "t_margin": float(t_margin)},
        ambiguous,
    )


def load_match_stats(path: Union[str, Path]) -> List[MatchStats]:
    """Read ``i,j,inliers,total`` rows from a CSV file."""
    path = Path(path)
    stats: List[MatchStats] = []
    try:
        with path.open(encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            missing = {"i", "j", "inliers", "total"} - set(reader.fieldnames or [])
            if missing:
                raise DataError(
                    f"{path}: missing CSV column(s): {', '.join(sorted(missing))}"
                )
            for lineno, row in enumerate(reader, start=2):
                try:
                    stats.append(
                        MatchStats(
                            int(row["i"]), int(row["j"]), int(row["inliers"]), int(row["total"])
                        )
                    )
                except ValueError as e:
                    raise DataError(f"{path}:{lineno}: {e}") from e
    except FileNotFoundError:
        raise FileNotFoundError(f"Match statistics file not found: {path}")
    return stats


def build_matching_graph(
    stats: Sequence[MatchStats], sigma: float, n: Optional[int] = None
) -> ConstraintGraph:
    """Link pairs whose inlier ratio is strictly above ``sigma``.

    ``n`` defaults to one past the largest referenced row. When a pair is
    listed more than once the highest ratio wins.
    """
    if not 0.0 < sigma < 1.0:
        raise ArgumentError(f"sigma={sigma} must be in (0, 1)")
    if n is None:
        n = 1 + max((max(s.i, s.j) for s in stats), default=-1)
    best: Dict[Tuple[int, int], float] = {}
    for s in stats:
        if s.inliers < 0 or s.total < 0:
            raise DataError(f"pair ({s.i}, {s.j}) has negative match counts")
        if s.inliers > s.total:
            raise DataError(
                f"pair ({s.i}, {s.j}) has inliers={s.inliers} > total={s.total}"
            )
        check_index(s.i, n)
        check_index(s.j, n)
        if s.i == s.j or s.total == 0:
            continue
        ratio = s.inliers / s.total
        if ratio <= sigma:
            continue
        key = (min(s.i, s.j), max(s.i, s.j))
        best[key] = max(ratio, best.get(key, ratio))

    keys = sorted(best)
    rows = np.asarray([k[0] for k in keys], dtype=np.int64)
    cols = np.asarray([k[1] for k in keys], dtype=np.int64)
    vals = np.asarray([best[k] for k in keys], dtype=np.float64)
    return _from_pairs("matching", n, rows, cols, vals, {"sigma": float(sigma)})


def _selfsim_block(
    data: np.ndarray, start: int, stop: int, delta: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    sims = data[start:stop] @ data.T
    rows, cols = np.nonzero((sims > delta) & (sims < DUPLICATE_COSINE))
    rows = rows + start
    upper = cols > rows
    rows, cols = rows[upper], cols[upper]
    return rows, cols, sims[rows - start, cols]


def build_selfsim_graph(
    db: FeatureMatrix, delta: float, block: int = 1024, workers: int = 1
) -> ConstraintGraph:
    """Link rows with ``delta < cosine < 1``, scanning ``block`` rows at a time.

    Only above-threshold pairs are kept; the N x N matrix never exists in full.
    Blocks may run on ``workers`` threads and are concatenated in block order.
    """
    if not -1.0 < delta < 1.0:
        raise ArgumentError(f"delta={delta} must be in (-1, 1)")
    data = db.data.astype(np.float64)
    starts = list(range(0, db.count, block))
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(
                executor.map(
                    lambda s: _selfsim_block(data, s, min(s + block, db.count), delta),
                    starts,
                )
            )
    else:
        parts = [_selfsim_block(data, s, min(s + block, db.count), delta) for s in starts]
    for idx, (rows, _, _) in enumerate(parts):
        logger.debug("selfsim block %d: %d pairs", idx, rows.shape[0])

    if parts:
        rows = np.concatenate([p[0] for p in parts])
        cols = np.concatenate([p[1] for p in parts])
        vals = np.concatenate([p[2] for p in parts])
    else:
        rows = cols = np.empty(0, dtype=np.int64)
        vals = np.empty(0, dtype=np.float64)
    return _from_pairs("selfsim", db.count, rows, cols, vals, {"delta": float(delta)})


def select_neighbors(graph: ConstraintGraph, candidate: int, l: int) -> NeighborSet:
    """The candidate followed by its ``l - 1`` strongest constraint neighbors.

    Missing slots repeat the candidate and set ``padded``.
    """
    candidate = check_index(candidate, graph.n, "candidate")
    if l < 1:
        raise ArgumentError(f"l={l} must be >= 1")
    lo = graph.indptr[candidate]
    hi = min(graph.indptr[candidate + 1], lo + l - 1)
    chosen = [int(j) for j in graph.indices[lo:hi]]
    deficit = l - 1 - len(chosen)
    neighbors = (candidate, *chosen, *([candidate] * deficit))
    return NeighborSet(candidate, neighbors, deficit > 0)


def build_graph(
    kind: str,
    *,
    db: Optional[FeatureMatrix] = None,
    meta: Optional[Sequence[ImageMeta]] = None,
    stats: Optional[Sequence[MatchStats]] = None,
    epsilon_m: float = 25.0,
    t: float = 1.0,
    t_margin: float = 0.0,
    sigma: float = 0.5,
    delta: float = 0.8,
) -> ConstraintGraph:
    """Dispatch to the builder for ``kind`` with the inputs it needs."""
    if kind == "gps":
        if meta is None:
            raise ArgumentError("gps constraint needs metadata")
        return build_gps_graph(meta, epsilon_m)
    if kind == "timestamp":
        if meta is None:
            raise ArgumentError("timestamp constraint needs metadata")
        return build_timestamp_graph(meta, t, t_margin)
    if kind == "matching":
        if stats is None:
            raise ArgumentError("matching constraint needs match statistics")
        n = db.count if db is not None else (len(meta) if meta is not None else None)
        return build_matching_graph(stats, sigma, n=n)
    if kind == "selfsim":
        if db is None:
            raise ArgumentError("selfsim constraint needs database features")
        return build_selfsim_graph(db, delta)
    raise ArgumentError(f"unknown constraint kind {kind!r}; expected one of {CONSTRAINT_KINDS}")
