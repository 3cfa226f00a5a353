# SPDX-License-Identifier: GPL-3.0-only
"""Mini-batch Adam training of MoF weights with validation early stopping."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from constraints import ConstraintGraph
from errors import ArgumentError, NumericError, TrainingError
from evaluation import GroundTruth, recall_at_k
from feature_store import FeatureMatrix, QueryFeature, knn_search
from logutils import get_logger
from mof import (
    AdamOptimizer,
    MoFWeights,
    TrainConfig,
    TrainExample,
    example_loss_and_grad,
    loss_bounds,
)
from pipeline import rerank_batch
from utils import write_jsonl

logger = get_logger(__name__)

# Slack on the per-example loss bounds for float64 rounding.
_BOUND_SLACK = 1e-9


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_r1: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss, "val_r1": self.val_r1}


@dataclass
class TrainingLog:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    dropped_examples: int = 0
    skipped_batches: int = 0

    @property
    def best_val_r1(self) -> float:
        return self.epochs[self.best_epoch].val_r1 if self.epochs else 0.0

    @property
    def initial_val_r1(self) -> float:
        return self.epochs[0].val_r1 if self.epochs else 0.0

    def summary(self) -> dict:
        """Run-level outcome, written next to the per-epoch log."""
        return {
            "epochs": len(self.epochs),
            "best_epoch": self.best_epoch,
            "initial_val_r1": self.initial_val_r1,
            "best_val_r1": self.best_val_r1,
            "stopped_early": self.stopped_early,
            "dropped_examples": self.dropped_examples,
            "skipped_batches": self.skipped_batches,
        }


class EarlyStopping:
    """Stop once the score has not improved for ``patience`` consecutive updates."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: Optional[float] = None
        self.stale = 0

    def update(self, score: float) -> bool:
        if self.best is None or score > self.best:
            self.best = score
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def _unmasked(indices: np.ndarray, labels: np.ndarray, ambiguous: Set[Tuple[int, int]]) -> np.ndarray:
    """False for negatives that form an ambiguous pair with a positive of the same example."""
    keep = np.ones(indices.shape[0], dtype=bool)
    if not ambiguous:
        return keep
    positives = [int(i) for i in indices[labels == 1]]
    for row, (index, label) in enumerate(zip(indices, labels)):
        if label == 0:
            index = int(index)
            keep[row] = not any((min(index, p), max(index, p)) in ambiguous for p in positives)
    return keep


def build_examples(
    db: FeatureMatrix,
    graph: ConstraintGraph,
    queries: Sequence[QueryFeature],
    gt: GroundTruth,
    k: int,
    l: int,
) -> Tuple[List[TrainExample], int]:
    """Retrieve, label and gather neighbor features for every query.

    Examples without both a positive and a negative candidate are dropped;
    returns the kept examples and the dropped count.
    """
    table = graph.neighbor_table(l)
    ambiguous = {(int(a), int(b)) for a, b in graph.ambiguous}
    examples: List[TrainExample] = []
    dropped = 0
    for q in queries:
        baseline = knn_search(db, q, k)
        labels = gt.labels(q.id, baseline.indices)
        keep = _unmasked(baseline.indices, labels, ambiguous)
        example = TrainExample(
            query=q.vector,
            neighbor_feats=db.data[table[baseline.indices[keep]]],
            labels=labels[keep],
            query_id=q.id,
        )
        if example.informative:
            examples.append(example)
        else:
            dropped += 1
    if dropped:
        logger.warning(
            "Dropped %d of %d training queries without both positive and negative candidates",
            dropped,
            len(queries),
        )
    return examples, dropped


def _check_bounds(example: TrainExample, direct: float, intra: float, cfg: TrainConfig) -> None:
    direct_max, intra_max = loss_bounds(example, cfg)
    if abs(direct) > direct_max + _BOUND_SLACK or abs(intra) > intra_max + _BOUND_SLACK:
        raise NumericError(
            f"loss out of bounds for query {example.query_id!r}: "
            f"|direct|={abs(direct):.6f} (max {direct_max}), |intra|={abs(intra):.6f} (max {intra_max})"
        )


def _batch_step(
    weights: MoFWeights, batch: Sequence[TrainExample], cfg: TrainConfig
) -> Tuple[float, np.ndarray]:
    total_loss = 0.0
    total_grad = np.zeros_like(weights.w)
    for example in batch:
        total, direct, intra, grad = example_loss_and_grad(weights, example, cfg)
        _check_bounds(example, direct, intra, cfg)
        total_loss += total
        total_grad += grad
    return total_loss / len(batch), total_grad / len(batch)


def _mean_loss(weights: MoFWeights, examples: Sequence[TrainExample], cfg: TrainConfig) -> float:
    losses = [example_loss_and_grad(weights, e, cfg)[0] for e in examples]
    return float(np.mean(losses))


def _val_r1(
    db: FeatureMatrix,
    graph: ConstraintGraph,
    weights: MoFWeights,
    queries: Sequence[QueryFeature],
    gt: GroundTruth,
    k: int,
    l: int,
    threads: int,
) -> float:
    batch = rerank_batch(db, graph, weights, queries, k, l, threads)
    return recall_at_k(batch.results, gt, [1]).recall_at[1]


def train(
    db: FeatureMatrix,
    graph: ConstraintGraph,
    train_queries: Sequence[QueryFeature],
    val_queries: Sequence[QueryFeature],
    gt: GroundTruth,
    k: int,
    l: int,
    cfg: TrainConfig,
    threads: int = 1,
) -> Tuple[MoFWeights, TrainingLog]:
    """Optimize MoF weights from identity initialization.

    Validation R@1 is measured with the full re-ranking pipeline before the
    first epoch and after each one; the returned weights are those of the
    best validation epoch (the earliest on ties, the initialization
    included). Without validation queries the training queries are used.
    """
    if k < 1 or l < 1:
        raise ArgumentError(f"k={k} and l={l} must both be >= 1")
    if not val_queries:
        logger.warning("No validation queries; selecting epochs on the training queries")
        val_queries = train_queries

    weights = MoFWeights.identity(l, db.dim, cfg.weight_mode)
    log = TrainingLog()
    examples, log.dropped_examples = build_examples(db, graph, train_queries, gt, k, l)
    if not examples:
        raise TrainingError(
            f"no usable training examples among {len(train_queries)} queries "
            f"({log.dropped_examples} dropped)"
        )

    best_r1 = _val_r1(db, graph, weights, val_queries, gt, k, l, threads)
    best_weights = weights
    log.epochs.append(EpochRecord(0, _mean_loss(weights, examples, cfg), best_r1))
    logger.info(
        "Training on %d examples, %d validation queries; initial val R@1 %.2f",
        len(examples),
        len(val_queries),
        best_r1,
    )

    rng = np.random.default_rng(cfg.seed)
    optimizer = AdamOptimizer(learning_rate=cfg.learning_rate)
    stopper = EarlyStopping(cfg.patience_epochs)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(examples))
        batch_losses: List[float] = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[start : start + cfg.batch_size]]
            try:
                loss, grad = _batch_step(weights, batch, cfg)
            except NumericError as e:
                log.skipped_batches += 1
                logger.warning("Epoch %d: skipping batch at %d: %s", epoch, start, e)
                continue
            weights = MoFWeights(optimizer.step(weights.w, grad), weights.mode)
            batch_losses.append(loss)

        epoch_loss = float(np.mean(batch_losses)) if batch_losses else float("nan")
        if not np.isfinite(epoch_loss):
            raise TrainingError(
                f"epoch {epoch}: loss is not finite ({log.skipped_batches} batches skipped so far)"
            )
        val_r1 = _val_r1(db, graph, weights, val_queries, gt, k, l, threads)
        log.epochs.append(EpochRecord(epoch, epoch_loss, val_r1))
        logger.info("Epoch %d: loss %.6f, val R@1 %.2f", epoch, epoch_loss, val_r1)
        if val_r1 > best_r1:
            best_r1 = val_r1
            best_weights = weights
            log.best_epoch = epoch
        if stopper.update(val_r1):
            log.stopped_early = epoch < cfg.max_epochs
            logger.info(
                "Validation R@1 stalled for %d epochs; stopping after epoch %d",
                cfg.patience_epochs,
                epoch,
            )
            break

    logger.info("Best epoch %d with val R@1 %.2f", log.best_epoch, best_r1)
    return best_weights, log


def write_train_log(path: Union[str, Path], log: TrainingLog) -> int:
    return write_jsonl(path, (record.to_dict() for record in log.epochs))
