# SPDX-License-Identifier: GPL-3.0-only
"""Mixture-of-Features refinement, its metric losses and analytic gradients.

A candidate's refined feature is the L2-normalized weighted sum of its
neighbor features, ``sum_j w[j] * f_nj`` (elementwise per dimension, or one
scalar per neighbor in ``scalar`` mode). Neighbor 0 is always the candidate
itself, so identity weights reproduce the candidate exactly.
"""

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np

from errors import ArgumentError, ConfigError, FeatureFormatError, NumericError
from feature_store import MIN_ROW_NORM, UNIT_NORM_TOL
from logutils import get_logger

logger = get_logger(__name__)

WEIGHT_MAGIC = b"EPMW"
WEIGHT_VERSION = 1
# magic, version u32, L u32, D u32
_HEADER = struct.Struct("<4sIII")

WEIGHT_MODES = ("elementwise", "scalar")

# Distances below this are treated as coincident points (subgradient 0).
_COINCIDENT = 1e-12


@dataclass(frozen=True, eq=False)
class MoFWeights:
    """L x D (or L x 1 in scalar mode) mixing weights, stored in float64."""

    w: np.ndarray
    mode: str = "elementwise"

    def __post_init__(self):
        if self.mode not in WEIGHT_MODES:
            raise ArgumentError(f"unknown weight mode {self.mode!r}")
        w = np.array(self.w, dtype=np.float64, copy=True)
        if w.ndim != 2:
            raise ArgumentError(f"weights must be 2-D, got shape {w.shape}")
        if self.mode == "scalar" and w.shape[1] != 1:
            raise ArgumentError(f"scalar weights must be L x 1, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise NumericError("weights contain non-finite entries")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def l(self) -> int:
        return int(self.w.shape[0])

    @property
    def dim(self) -> int:
        """Weight columns: the feature dimension, or 1 in scalar mode."""
        return int(self.w.shape[1])

    def accepts_dim(self, dim: int) -> bool:
        return self.mode == "scalar" or self.dim == dim

    @cached_property
    def w32(self) -> np.ndarray:
        return self.w.astype(np.float32)

    @classmethod
    def identity(cls, l: int, dim: int, mode: str = "elementwise") -> "MoFWeights":
        """Row 0 all ones, every other row zero: refinement returns the candidate."""
        if l < 1 or dim < 1:
            raise ArgumentError(f"identity weights need l >= 1 and dim >= 1, got {l}, {dim}")
        w = np.zeros((l, dim if mode == "elementwise" else 1))
        w[0] = 1.0
        return cls(w, mode)

    @classmethod
    def uniform(cls, l: int, dim: int, mode: str = "elementwise") -> "MoFWeights":
        """Equal weight on every neighbor: plain averaging."""
        return cls(np.full((l, dim if mode == "elementwise" else 1), 1.0 / l), mode)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.003
    batch_size: int = 64
    patience_epochs: int = 3
    lambda_direct: float = 1.0
    lambda_intra: float = 0.0
    margin_alpha: float = 0.0
    hinge: bool = False
    max_epochs: int = 50
    seed: int = 0
    weight_mode: str = "elementwise"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate={self.learning_rate} must be positive")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size={self.batch_size} must be >= 1")
        if self.patience_epochs < 1:
            raise ConfigError(f"patience_epochs={self.patience_epochs} must be >= 1")
        if self.lambda_direct < 0 or self.lambda_intra < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lambda_direct == 0 and self.lambda_intra == 0:
            raise ConfigError("lambda_direct and lambda_intra cannot both be zero")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs={self.max_epochs} must be >= 0")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"weight_mode must be one of {WEIGHT_MODES}")


@dataclass(frozen=True, eq=False)
class TrainExample:
    """One query with its K candidates, their L-neighbor features and labels."""

    query: np.ndarray
    neighbor_feats: np.ndarray
    labels: np.ndarray
    query_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "query", np.asarray(self.query, dtype=np.float64))
        object.__setattr__(
            self, "neighbor_feats", np.asarray(self.neighbor_feats, dtype=np.float64)
        )
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.neighbor_feats.ndim != 3:
            raise ArgumentError("neighbor_feats must be K x L x D")
        if self.labels.shape[0] != self.neighbor_feats.shape[0]:
            raise ArgumentError("one label per candidate is required")

    @property
    def candidate_feats(self) -> np.ndarray:
        return self.neighbor_feats[:, 0]

    @property
    def informative(self) -> bool:
        return bool(np.any(self.labels == 1) and np.any(self.labels == 0))


def _mix(weights: MoFWeights, feats: np.ndarray) -> np.ndarray:
    w = weights.w32 if feats.dtype == np.float32 else weights.w
    if weights.mode == "scalar":
        return np.einsum("kld,l->kd", feats, w[:, 0])
    return np.einsum("kld,ld->kd", feats, w)


def refine_many(
    weights: MoFWeights, neighbor_feats: np.ndarray, keep_unit_rows: bool = True
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Refine K candidates at once.

    Returns ``(refined, norms, fallback)``: the K x D float64 refined features,
    the pre-normalization norms and a mask of candidates that fell back to
    their own feature because the mixture vanished.

    With ``keep_unit_rows`` a mixture within ``UNIT_NORM_TOL`` of unit norm is
    returned undivided, so identity weights reproduce stored rows bit for bit.
    Loss and gradient evaluation pass ``False`` and every mixture is divided
    by its norm.
    """
    feats = np.asarray(neighbor_feats)
    if feats.dtype != np.float32:
        feats = feats.astype(np.float64, copy=False)
    if feats.ndim != 3 or feats.shape[1] != weights.l or not weights.accepts_dim(feats.shape[2]):
        raise ArgumentError(
            f"neighbor features of shape {feats.shape} do not match weights "
            f"of shape {weights.w.shape}"
        )
    mixed = _mix(weights, feats).astype(np.float64, copy=False)
    norms = np.sqrt(np.einsum("kd,kd->k", mixed, mixed))
    fallback = norms < MIN_ROW_NORM
    scale = np.where(fallback, 1.0, norms)
    if keep_unit_rows:
        scale[np.abs(norms - 1.0) <= UNIT_NORM_TOL] = 1.0
    refined = mixed / scale[:, None]
    if fallback.any():
        refined[fallback] = feats[fallback, 0]
    return refined, norms, fallback


def refine(weights: MoFWeights, neighbor_feats: np.ndarray) -> np.ndarray:
    """Refine one candidate from its L x D neighbor features."""
    feats = np.asarray(neighbor_feats)
    if feats.ndim != 2:
        raise ArgumentError(f"neighbor features must be L x D, got shape {feats.shape}")
    refined, _, _ = refine_many(weights, feats[None])
    return refined[0]


def _distance(a: np.ndarray, b: np.ndarray) -> float:
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sqrt(np.sum(diff * diff)))


def loss_direct(
    query: np.ndarray,
    refined: Sequence[Tuple[np.ndarray, int]],
    hinge: bool = False,
    alpha: float = 0.0,
) -> float:
    """Sum of positive distances to the query minus sum of negative distances.

    In hinge mode each (positive, negative) pair contributes
    ``max(0, d(p, q) - d(n, q) + alpha)`` instead.
    """
    pos = [_distance(f, query) for f, y in refined if y == 1]
    neg = [_distance(f, query) for f, y in refined if y == 0]
    if hinge:
        return float(sum(max(0.0, dp - dn + alpha) for dp in pos for dn in neg))
    return float(sum(pos) - sum(neg))


def loss_intra(
    refined: Sequence[Tuple[np.ndarray, int]], hinge: bool = False, alpha: float = 0.0
) -> float:
    """Pull refined positives together and push them away from negatives.

    Unordered positive pairs add their distance; ordered (positive, negative)
    pairs subtract theirs. In hinge mode every (i, j, k) triplet of positive
    anchor, other positive and negative contributes
    ``max(0, d(i, j) - d(i, k) + alpha)``.
    """
    pos = [np.asarray(f) for f, y in refined if y == 1]
    neg = [np.asarray(f) for f, y in refined if y == 0]
    if hinge:
        total = 0.0
        for i, anchor in enumerate(pos):
            for j, other in enumerate(pos):
                if i == j:
                    continue
                d_ij = _distance(anchor, other)
                for n in neg:
                    total += max(0.0, d_ij - _distance(anchor, n) + alpha)
        return float(total)
    pull = sum(
        _distance(pos[i], pos[j]) for i in range(len(pos)) for j in range(i + 1, len(pos))
    )
    push = sum(_distance(p, n) for p in pos for n in neg)
    return float(pull - push)


def loss_total(direct: float, intra: float, cfg: TrainConfig) -> float:
    return cfg.lambda_direct * direct + cfg.lambda_intra * intra


def _unit_diffs(diff: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    safe = np.where(dist > _COINCIDENT, dist, 1.0)
    unit = np.where((dist > _COINCIDENT)[..., None], diff / safe[..., None], 0.0)
    return dist, unit


def example_loss_and_grad(
    weights: MoFWeights, example: TrainExample, cfg: TrainConfig
) -> Tuple[float, float, float, np.ndarray]:
    """Loss terms and the exact gradient for one example.

    Returns ``(total, direct, intra, grad)`` with ``grad`` shaped like
    ``weights.w``. Coincident points and inactive hinge terms use subgradient
    0; candidates in the refine fallback branch get zero gradient.
    """
    feats = example.neighbor_feats
    q = example.query
    pos = example.labels == 1
    neg = ~pos
    refined, norms, fallback = refine_many(weights, feats, keep_unit_rows=False)
    alpha = cfg.margin_alpha

    grad_f = np.zeros_like(refined)

    # direct term, anchored on the query
    dist_q, unit_q = _unit_diffs(refined - q[None, :])
    if cfg.hinge:
        margins = dist_q[pos][:, None] - dist_q[neg][None, :] + alpha
        active = margins > 0
        direct = float(np.sum(margins[active]))
        coeff = np.zeros(dist_q.shape[0])
        coeff[pos] = active.sum(axis=1)
        coeff[neg] = -active.sum(axis=0)
    else:
        coeff = np.where(pos, 1.0, -1.0)
        direct = float(np.sum(coeff * dist_q))
    grad_f += cfg.lambda_direct * coeff[:, None] * unit_q

    # intra term, between refined candidates
    pair_dist, pair_unit = _unit_diffs(refined[:, None, :] - refined[None, :, :])
    pp = np.outer(pos, pos)
    np.fill_diagonal(pp, False)
    pn = np.outer(pos, neg)
    if cfg.hinge:
        margins = pair_dist[:, :, None] - pair_dist[:, None, :] + alpha
        active = pp[:, :, None] & pn[:, None, :] & (margins > 0)
        intra = float(np.sum(margins[active]))
        pull = active.sum(axis=2).astype(np.float64)
        push = active.sum(axis=1).astype(np.float64)
    else:
        pull = np.triu(pp, k=1).astype(np.float64)
        push = pn.astype(np.float64)
        intra = float(np.sum(pull * pair_dist) - np.sum(push * pair_dist))
    coupling = (pull + pull.T) - (push + push.T)
    grad_f += cfg.lambda_intra * np.einsum("ij,ijd->id", coupling, pair_unit)

    # back through the L2 normalization
    radial = np.sum(refined * grad_f, axis=1)
    safe_norms = np.where(fallback, 1.0, norms)
    grad_mixed = (grad_f - refined * radial[:, None]) / safe_norms[:, None]
    grad_mixed[fallback] = 0.0

    if weights.mode == "scalar":
        grad = np.einsum("kd,kld->l", grad_mixed, feats)[:, None]
    else:
        grad = np.einsum("kd,kld->ld", grad_mixed, feats)
    total = loss_total(direct, intra, cfg)
    if not (np.isfinite(total) and np.all(np.isfinite(grad))):
        raise NumericError(f"non-finite loss or gradient for query {example.query_id!r}")
    return total, direct, intra, grad


def grad_weights(weights: MoFWeights, example: TrainExample, cfg: TrainConfig) -> np.ndarray:
    """Exact gradient of the total loss with respect to the weights."""
    return example_loss_and_grad(weights, example, cfg)[3]


def example_loss(weights: MoFWeights, example: TrainExample, cfg: TrainConfig) -> float:
    """Total loss of one example, evaluated through the scalar loss functions."""
    refined, _, _ = refine_many(weights, example.neighbor_feats, keep_unit_rows=False)
    entries = list(zip(refined, example.labels.tolist()))
    direct = loss_direct(example.query, entries, cfg.hinge, cfg.margin_alpha)
    intra = loss_intra(entries, cfg.hinge, cfg.margin_alpha) if len(entries) > 1 else 0.0
    return loss_total(direct, intra, cfg)


def loss_bounds(example: TrainExample, cfg: TrainConfig) -> Tuple[float, float]:
    """Upper bounds on |direct| and |intra| for unit-norm refined features."""
    k = example.labels.shape[0]
    n_pos = int(np.sum(example.labels == 1))
    n_neg = k - n_pos
    if cfg.hinge:
        reach = 2.0 + max(cfg.margin_alpha, 0.0)
        return reach * n_pos * n_neg, reach * n_pos * max(n_pos - 1, 0) * n_neg
    return 2.0 * k, 2.0 * (n_pos * (n_pos - 1) / 2 + n_pos * n_neg)


class AdamOptimizer:
    """Adam with bias-corrected moment estimates."""

    def __init__(
        self,
        learning_rate: float = 0.003,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = None
        self.v = None
        self.iteration = 0

    def step(self, params: np.ndarray, gradient: np.ndarray) -> np.ndarray:
        """Return the updated parameters; ``params`` itself is not modified."""
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.iteration += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * gradient
        self.v = self.beta2 * self.v + (1 - self.beta2) * gradient**2
        m_hat = self.m / (1 - self.beta1**self.iteration)
        v_hat = self.v / (1 - self.beta2**self.iteration)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)


def save_weights(path: Union[str, Path], weights: MoFWeights) -> int:
    """Write the EPMW file (float32 body); return its size in bytes."""
    body = np.ascontiguousarray(weights.w, dtype="<f4")
    payload = _HEADER.pack(WEIGHT_MAGIC, WEIGHT_VERSION, weights.l, weights.dim) + body.tobytes()
    Path(path).write_bytes(payload)
    logger.info("Wrote %dx%d %s weights to %s", weights.l, weights.dim, weights.mode, path)
    return len(payload)


def load_weights(path: Union[str, Path], mode: str = "") -> MoFWeights:
    """Read an EPMW file. An L x 1 body loads in scalar mode unless ``mode`` says otherwise."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"Weight file not found: {path}")
    if len(raw) < _HEADER.size:
        raise FeatureFormatError(f"{path}: file shorter than the weight header")
    magic, version, l, dim = _HEADER.unpack_from(raw, 0)
    if magic != WEIGHT_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}, expected {WEIGHT_MAGIC!r}")
    if version != WEIGHT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported weight format version {version}")
    if len(raw) != _HEADER.size + 4 * l * dim:
        raise FeatureFormatError(f"{path}: body does not hold {l}x{dim} float32 values")
    w = np.frombuffer(raw, dtype="<f4", count=l * dim, offset=_HEADER.size).reshape(l, dim)
    mode = mode or ("scalar" if dim == 1 else "elementwise")
    return MoFWeights(w.astype(np.float64), mode)

