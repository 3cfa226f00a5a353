# SPDX-License-Identifier: GPL-3.0-only
"""Command-line surface: ingest, build-constraints, train, rerank, eval, bench, synth, run, sweep."""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import logutils
from artifact_registry import ArtifactRegistry
from config import RunConfig, defaults_from_ini, load_run_config
from constraints import CONSTRAINT_KINDS, ConstraintGraph, build_graph, load_match_stats
from errors import DataError
from evaluation import GroundTruth, LatencyStats, build_ground_truth, latency_bench, recall_at_k
from feature_store import (
    FeatureMatrix,
    ImageMeta,
    QueryFeature,
    load_features,
    load_metadata,
    load_queries,
    save_features,
    save_metadata,
)
from logutils import get_logger
from mof import WEIGHT_MODES, MoFWeights, load_weights, save_weights
from pipeline import BatchResult, read_results, results_digest, write_results
from reranker_interfaces import read_defaults, read_manifest
from rerankers import RERANKERS, create_reranker
from synthetic import SynthSpec, generate_synthetic, save_synthetic
from trainer import TrainingLog, train, write_train_log

logger = get_logger(__name__)

GRAPH_FILE = "graph.json"
WEIGHTS_FILE = "weights.epmw"
TRAIN_LOG_FILE = "train_log.jsonl"
TRAIN_SUMMARY_FILE = "train_summary.json"
RESULTS_FILE = "rerank_results.jsonl"
REPORT_FILE = "eval_report.json"
LATENCY_FILE = "latency.json"
BENCH_FILE = "bench.json"
SWEEP_FILE = "sweep.json"
SYNTH_FILE = "synth.json"

SWEEP_KS = "3,5,10,30,50"
SWEEP_LS = "2,4,6,8,10,12,16"

# argparse dest -> RunConfig field
_OVERRIDES = {
    "db": "db_features",
    "db_meta": "db_metadata",
    "queries": "query_features",
    "queries_meta": "query_metadata",
    "match_stats": "match_stats",
    "weights": "weights",
    "out": "out_dir",
    "k": "k",
    "l": "l",
    "threads": "threads",
    "constraint": "constraint",
    "epsilon": "epsilon_m",
    "t": "t",
    "t_margin": "t_margin",
    "sigma": "sigma",
    "delta": "delta",
    "learning_rate": "learning_rate",
    "batch_size": "batch_size",
    "patience": "patience_epochs",
    "lambda_direct": "lambda_direct",
    "lambda_intra": "lambda_intra",
    "margin_alpha": "margin_alpha",
    "hinge": "hinge",
    "max_epochs": "max_epochs",
    "seed": "seed",
    "weight_mode": "weight_mode",
    "reranker": "reranker",
    "beta": "beta",
    "k_neighbors": "k_neighbors",
    "top_m": "top_m",
    "gt_epsilon": "gt_epsilon_m",
    "recall_ks": "recall_ks",
    "repetitions": "bench_repetitions",
}


def _int_list(text: str) -> Tuple[int, ...]:
    try:
        values = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _shared_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    io = shared.add_argument_group("inputs and outputs")
    io.add_argument("--config", help="strict JSON run configuration; flags override it")
    io.add_argument("--db", help="database feature file (EPFV)")
    io.add_argument("--db-meta", help="database metadata (JSON lines)")
    io.add_argument("--queries", help="query feature file (EPFV)")
    io.add_argument("--queries-meta", help="query metadata (JSON lines)")
    io.add_argument("--match-stats", help="CSV of i,j,inliers,total for --constraint matching")
    io.add_argument("--graph", help="prebuilt constraint graph JSON")
    io.add_argument("--weights", help="MoF weight file (EPMW)")
    io.add_argument("--out", help="output directory")
    io.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")

    graph = shared.add_argument_group("constraints")
    graph.add_argument("--constraint", choices=CONSTRAINT_KINDS)
    graph.add_argument("--epsilon", type=float, help="GPS link distance in meters")
    graph.add_argument("--t", type=float, help="timestamp link window")
    graph.add_argument("--t-margin", type=float, help="ambiguous band beyond --t")
    graph.add_argument("--sigma", type=float, help="inlier ratio threshold")
    graph.add_argument("--delta", type=float, help="self-similarity cosine threshold")

    rr = shared.add_argument_group("re-ranking")
    rr.add_argument("--k", type=int, help="candidates re-ranked per query")
    rr.add_argument("--l", type=int, help="neighbors mixed per candidate")
    rr.add_argument("--reranker", choices=RERANKERS)
    rr.add_argument("--beta", type=float)
    rr.add_argument("--k-neighbors", type=int)
    rr.add_argument("--top-m", type=int)
    rr.add_argument("--threads", type=int, help="worker threads, 0 for every core")
    rr.add_argument("--seed", type=int)

    tr = shared.add_argument_group("training")
    tr.add_argument("--learning-rate", type=float)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--patience", type=int, help="epochs without val R@1 gain before stopping")
    tr.add_argument("--lambda-direct", type=float)
    tr.add_argument("--lambda-intra", type=float)
    tr.add_argument("--margin-alpha", type=float)
    tr.add_argument("--hinge", action=argparse.BooleanOptionalAction, default=None)
    tr.add_argument("--max-epochs", type=int)
    tr.add_argument("--weight-mode", choices=WEIGHT_MODES)

    ev = shared.add_argument_group("evaluation")
    ev.add_argument("--gt-epsilon", type=float, help="ground-truth radius in meters")
    ev.add_argument("--recall-ks", type=_int_list, help="comma-separated Recall@K cutoffs")
    ev.add_argument("--repetitions", type=int, help="latency benchmark repetitions")
    return shared


def build_parser() -> argparse.ArgumentParser:
    manifest = read_manifest().get("package", {})
    parser = argparse.ArgumentParser(
        prog=manifest.get("name", "embodied-rerank"),
        description="Re-rank place recognition candidates with embodied constraints.",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"{manifest.get('display_name', '')} {manifest.get('version', '')}".strip(),
    )
    shared = _shared_parser()
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", parents=[shared], help="validate and normalize a feature bundle")
    ingest.add_argument("--features", required=True)
    ingest.add_argument("--metadata", required=True)
    ingest.add_argument("--name", default="db", help="output file stem")
    ingest.set_defaults(handler=cmd_ingest)

    sub.add_parser(
        "build-constraints", parents=[shared], help="build and export a constraint graph"
    ).set_defaults(handler=cmd_build_constraints)
    sub.add_parser("train", parents=[shared], help="train MoF weights").set_defaults(
        handler=cmd_train
    )
    sub.add_parser("rerank", parents=[shared], help="re-rank queries").set_defaults(
        handler=cmd_rerank
    )

    evaluate = sub.add_parser("eval", parents=[shared], help="score re-ranking results")
    evaluate.add_argument("--results", required=True, help="JSON lines written by rerank")
    evaluate.set_defaults(handler=cmd_eval)

    sub.add_parser("bench", parents=[shared], help="time retrieval and refinement").set_defaults(
        handler=cmd_bench
    )

    synth = sub.add_parser("synth", parents=[shared], help="generate a synthetic benchmark")
    synth.add_argument("--places", type=int, default=50)
    synth.add_argument("--views", type=int, default=8)
    synth.add_argument("--dim", type=int, default=64)
    synth.add_argument("--noise", type=float, help="intra-place noise; omitted scans a schedule")
    synth.add_argument("--distractors", type=int, default=20)
    synth.add_argument("--queries-per-place", type=int, default=40)
    synth.add_argument("--min-gain", type=float, default=5.0)
    synth.set_defaults(handler=cmd_synth)

    sub.add_parser(
        "run", parents=[shared], help="build constraints, train, re-rank and evaluate"
    ).set_defaults(handler=cmd_run_args)

    sweep = sub.add_parser("sweep", parents=[shared], help="R@1 over a grid of K and L")
    sweep.add_argument("--ks", type=_int_list, default=_int_list(SWEEP_KS))
    sweep.add_argument("--ls", type=_int_list, default=_int_list(SWEEP_LS))
    sweep.set_defaults(handler=cmd_sweep)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults from config.ini, then --config, then command-line flags."""
    defaults = defaults_from_ini(read_defaults())
    overrides = {
        field: getattr(args, dest)
        for dest, field in _OVERRIDES.items()
        if getattr(args, dest, None) is not None
    }
    if getattr(args, "config", None):
        return load_run_config(args.config, defaults, overrides)
    return RunConfig(**defaults).with_overrides(**overrides)


def _threads(cfg: RunConfig) -> int:
    return cfg.threads or os.cpu_count() or 1


def _require_paths(cfg: RunConfig, *fields: str) -> None:
    missing = [f for f in fields if not getattr(cfg, f)]
    if missing:
        raise DataError(f"missing input path(s): {', '.join(missing)}")


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_db(cfg: RunConfig) -> Tuple[FeatureMatrix, List[ImageMeta]]:
    _require_paths(cfg, "db_features", "db_metadata")
    db = load_features(cfg.db_features)
    meta = load_metadata(cfg.db_metadata)
    if len(meta) != db.count:
        raise DataError(
            f"database metadata has {len(meta)} records but features have {db.count} rows"
        )
    return db, meta


def _load_query_bundle(cfg: RunConfig) -> Tuple[List[QueryFeature], List[ImageMeta]]:
    _require_paths(cfg, "query_features", "query_metadata")
    return load_queries(cfg.query_features, cfg.query_metadata)


def _build_graph(
    cfg: RunConfig, db: FeatureMatrix, meta: Sequence[ImageMeta], graph_path: Optional[str] = None
) -> ConstraintGraph:
    if graph_path:
        graph = ConstraintGraph.from_json(Path(graph_path).read_text(encoding="utf-8"))
        if graph.n != db.count:
            raise DataError(f"graph has {graph.n} nodes but the database has {db.count} rows")
        return graph
    if cfg.constraint == "matching" and not cfg.match_stats:
        raise DataError("--constraint matching needs --match-stats")
    stats = load_match_stats(cfg.match_stats) if cfg.constraint == "matching" else None
    return build_graph(
        cfg.constraint,
        db=db,
        meta=meta,
        stats=stats,
        epsilon_m=cfg.epsilon_m,
        t=cfg.t,
        t_margin=cfg.t_margin,
        sigma=cfg.sigma,
        delta=cfg.delta,
    )


def _splits(
    queries: Sequence[QueryFeature], meta: Sequence[ImageMeta]
) -> Dict[str, List[QueryFeature]]:
    """Queries by split; without any split labels every query lands in all three."""
    if all(m.split is None for m in meta):
        return {"train": list(queries), "val": list(queries), "test": list(queries)}
    out: Dict[str, List[QueryFeature]] = {"train": [], "val": [], "test": []}
    for q, m in zip(queries, meta):
        if m.split is not None:
            out[m.split].append(q)
    return out


def _weights_for(
    cfg: RunConfig,
    db: FeatureMatrix,
    graph: ConstraintGraph,
    splits: Dict[str, List[QueryFeature]],
    gt: GroundTruth,
) -> Tuple[MoFWeights, Optional[TrainingLog]]:
    if cfg.weights:
        return load_weights(cfg.weights, cfg.weight_mode), None
    return train(
        db, graph, splits["train"], splits["val"], gt, cfg.k, cfg.l,
        cfg.to_train_config(), _threads(cfg),
    )


def _evaluate(batch: BatchResult, gt: GroundTruth, cfg: RunConfig) -> Dict[str, Any]:
    ks = sorted(set(cfg.recall_ks) | {1})
    baseline = recall_at_k([r.baseline for r in batch], gt, ks)
    reranked = recall_at_k(batch.results, gt, ks)
    return {
        "reranker": cfg.reranker,
        "baseline": baseline.to_dict(include_latency=False),
        "reranked": reranked.to_dict(include_latency=False),
        "failures": [{"query_id": qid, "error": err} for qid, err in batch.failures],
    }


def _log_report(report: Dict[str, Any]) -> None:
    for name in ("baseline", "reranked"):
        recalls = ", ".join(f"R@{k} {v:.2f}" for k, v in report[name]["recall_at"].items())
        logger.info("%s: %s", name, recalls)


def cmd_ingest(args: argparse.Namespace, cfg: RunConfig) -> int:
    db = load_features(args.features)
    meta = load_metadata(args.metadata)
    if len(meta) != db.count:
        raise DataError(
            f"metadata has {len(meta)} records but the feature file has {db.count} rows"
        )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_features(out / f"{args.name}.epfv", db)
    save_metadata(out / f"{args.name}_meta.jsonl", meta)
    logger.info("Ingested %d rows into %s", db.count, out)
    return 0


def cmd_build_constraints(args: argparse.Namespace, cfg: RunConfig) -> int:
    db, meta = _load_db(cfg)
    graph = _build_graph(cfg, db, meta)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / GRAPH_FILE).write_text(graph.to_json(), encoding="utf-8")
    logger.info(
        "Wrote %s graph with %d edges (%d ambiguous pairs) to %s",
        graph.kind,
        graph.edge_count,
        graph.ambiguous.shape[0],
        out / GRAPH_FILE,
    )
    return 0


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    db, db_meta = _load_db(cfg)
    queries, query_meta = _load_query_bundle(cfg)
    graph = _build_graph(cfg, db, db_meta, args.graph)
    gt = build_ground_truth(query_meta, db_meta, cfg.gt_epsilon_m)
    splits = _splits(queries, query_meta)
    weights, log = train(
        db, graph, splits["train"], splits["val"], gt, cfg.k, cfg.l,
        cfg.to_train_config(), _threads(cfg),
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(out / WEIGHTS_FILE, weights)
    write_train_log(out / TRAIN_LOG_FILE, log)
    _write_json(out / TRAIN_SUMMARY_FILE, log.summary())
    return 0


def cmd_rerank(args: argparse.Namespace, cfg: RunConfig) -> int:
    db, db_meta = _load_db(cfg)
    queries, _ = _load_query_bundle(cfg)
    graph = None
    weights = None
    if cfg.reranker in ("adaptive", "mof"):
        graph = _build_graph(cfg, db, db_meta, args.graph)
    if cfg.reranker == "mof":
        if not cfg.weights:
            raise DataError("--reranker mof needs --weights; run train first")
        weights = load_weights(cfg.weights, cfg.weight_mode)
    reranker = create_reranker(
        cfg.reranker, db, cfg.k, graph=graph, weights=weights, l=cfg.l,
        baseline_cfg=cfg.to_baseline_config(),
    )
    batch = reranker.rerank_batch(queries, _threads(cfg))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_results(out / RESULTS_FILE, batch.results)
    return 1 if batch.failures else 0


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    _require_paths(cfg, "db_metadata", "query_metadata")
    db_meta = load_metadata(cfg.db_metadata)
    query_meta = load_metadata(cfg.query_metadata)
    gt = build_ground_truth(query_meta, db_meta, cfg.gt_epsilon_m)
    results = read_results(args.results)
    report = _evaluate(BatchResult(results), gt, cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / REPORT_FILE, report)
    _log_report(report)
    return 0


def cmd_bench(args: argparse.Namespace, cfg: RunConfig) -> int:
    db, db_meta = _load_db(cfg)
    queries, _ = _load_query_bundle(cfg)
    graph = _build_graph(cfg, db, db_meta, args.graph)
    if cfg.weights:
        weights = load_weights(cfg.weights, cfg.weight_mode)
    else:
        weights = MoFWeights.identity(cfg.l, db.dim, cfg.weight_mode)
    report = latency_bench(db, graph, weights, queries, cfg.k, cfg.l, cfg.bench_repetitions)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / BENCH_FILE, report.to_dict())
    return 0


def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    spec = SynthSpec(
        n_places=args.places,
        views_per_place=args.views,
        dim=args.dim,
        intra_place_noise=args.noise,
        distractor_count=args.distractors,
        constraint_kind=cfg.constraint,
        seed=cfg.seed,
        queries_per_place=args.queries_per_place,
        min_gain=args.min_gain,
        k=cfg.k,
        l=cfg.l,
    )
    dataset = generate_synthetic(spec)
    out = Path(cfg.out_dir)
    save_synthetic(dataset, out)
    _write_json(
        out / SYNTH_FILE,
        {
            "noise": dataset.noise,
            "baseline_r1": dataset.baseline_r1,
            "uniform_r1": dataset.uniform_r1,
            "graph_params": spec.graph_params(),
        },
    )
    return 0


def cmd_run(cfg: RunConfig) -> int:
    """Build constraints, train when needed, re-rank and evaluate into ``cfg.out_dir``.

    The registry stays flagged partial if any stage fails.
    """
    registry = ArtifactRegistry(cfg.out_dir)
    registry.start("run", cfg.to_dict())
    stage = "load"
    try:
        db, db_meta = _load_db(cfg)
        queries, query_meta = _load_query_bundle(cfg)
        gt = build_ground_truth(query_meta, db_meta, cfg.gt_epsilon_m)
        splits = _splits(queries, query_meta)
        registry.stage(stage, "done")

        graph = None
        if cfg.reranker in ("adaptive", "mof"):
            stage = "build-constraints"
            graph = _build_graph(cfg, db, db_meta)
            registry.path(GRAPH_FILE).write_text(graph.to_json(), encoding="utf-8")
            registry.record(GRAPH_FILE)
            registry.stage(stage, "done")

        weights = None
        if cfg.reranker == "mof":
            stage = "train"
            weights, log = _weights_for(cfg, db, graph, splits, gt)
            save_weights(registry.path(WEIGHTS_FILE), weights)
            registry.record(WEIGHTS_FILE)
            if log is not None:
                write_train_log(registry.path(TRAIN_LOG_FILE), log)
                registry.record(TRAIN_LOG_FILE)
                _write_json(registry.path(TRAIN_SUMMARY_FILE), log.summary())
                registry.record(TRAIN_SUMMARY_FILE)
            registry.stage(stage, "done")

        stage = "rerank"
        reranker = create_reranker(
            cfg.reranker, db, cfg.k, graph=graph, weights=weights, l=cfg.l,
            baseline_cfg=cfg.to_baseline_config(),
        )
        batch = reranker.rerank_batch(splits["test"], _threads(cfg))
        write_results(registry.path(RESULTS_FILE), batch.results)
        registry.record(RESULTS_FILE, results_digest(batch.results))
        registry.stage(stage, "done")

        stage = "eval"
        report = _evaluate(batch, gt, cfg)
        _write_json(registry.path(REPORT_FILE), report)
        registry.record(REPORT_FILE)
        latency = LatencyStats.from_samples([r.refine_time_ns for r in batch])
        # timings differ between runs and stay out of the registry
        _write_json(registry.path(LATENCY_FILE), {"refine": latency.to_dict(), "threads": _threads(cfg)})
        registry.stage(stage, "done")
        _log_report(report)
    except Exception as e:
        registry.stage(stage, "failed", f"{type(e).__name__}: {e}")
        raise

    if batch.failures:
        logger.error("%d queries failed; run left partial", len(batch.failures))
        return 1
    registry.complete()
    return 0


def cmd_run_args(args: argparse.Namespace, cfg: RunConfig) -> int:
    return cmd_run(cfg)


def cmd_sweep(args: argparse.Namespace, cfg: RunConfig) -> int:
    db, db_meta = _load_db(cfg)
    queries, query_meta = _load_query_bundle(cfg)
    gt = build_ground_truth(query_meta, db_meta, cfg.gt_epsilon_m)
    splits = _splits(queries, query_meta)
    graph = _build_graph(cfg, db, db_meta, args.graph)

    rows = []
    for k in args.ks:
        if k > db.count:
            logger.warning("Skipping K=%d larger than the database", k)
            continue
        for l in args.ls:
            cell = cfg.with_overrides(k=k, l=l)
            weights = None
            if cell.reranker == "mof":
                weights, _ = _weights_for(cell, db, graph, splits, gt)
            reranker = create_reranker(
                cell.reranker, db, k, graph=graph, weights=weights, l=l,
                baseline_cfg=cell.to_baseline_config(),
            )
            report = _evaluate(reranker.rerank_batch(splits["test"], _threads(cell)), gt, cell)
            rows.append(
                {
                    "k": k,
                    "l": l,
                    "baseline_r1": report["baseline"]["recall_at"]["1"],
                    "reranked_r1": report["reranked"]["recall_at"]["1"],
                }
            )
            logger.info(
                "K=%d L=%d: R@1 %.2f -> %.2f", k, l, rows[-1]["baseline_r1"], rows[-1]["reranked_r1"]
            )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / SWEEP_FILE, {"reranker": cfg.reranker, "cells": rows})
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.log_level:
            logutils.set_level(args.log_level)
        cfg = resolve_config(args)
        handler: Callable[[argparse.Namespace, RunConfig], int] = args.handler
        return handler(args, cfg)
    except (ValueError, ArithmeticError, RuntimeError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
