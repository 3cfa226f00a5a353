# SPDX-License-Identifier: GPL-3.0-only

import json

import pytest

from cli import main
from feature_store import load_features


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    code = main(
        [
            "synth",
            "--places", "8",
            "--views", "4",
            "--dim", "16",
            "--distractors", "4",
            "--queries-per-place", "10",
            "--noise", "0.3",
            "--k", "6",
            "--l", "4",
            "--out", str(out),
        ]
    )
    assert code == 0
    return out


def _inputs(bundle):
    return [
        "--db", str(bundle / "db.epfv"),
        "--db-meta", str(bundle / "db_meta.jsonl"),
        "--queries", str(bundle / "queries.epfv"),
        "--queries-meta", str(bundle / "queries_meta.jsonl"),
        "--k", "6",
        "--l", "4",
        "--threads", "1",
    ]


def _train_flags():
    return ["--max-epochs", "3", "--batch-size", "16"]


class TestParser:
    def test_help_lists_shared_flags(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["run", "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for flag in (
            "--constraint", "--epsilon", "--t", "--t-margin", "--sigma", "--delta", "--k", "--l",
            "--reranker", "--beta", "--k-neighbors", "--top-m", "--seed", "--threads", "--out",
        ):
            assert flag in text

    def test_version(self, capsys):
        with pytest.raises(SystemExit):
            main(["--version"])
        assert "0.1.0" in capsys.readouterr().out

    def test_unknown_constraint_rejected_by_parser(self):
        with pytest.raises(SystemExit) as exc:
            main(["run", "--constraint", "wifi"])
        assert exc.value.code == 2


class TestConfigErrors:
    def test_invalid_sigma_fails_before_any_work(self, tmp_path, bundle):
        out = tmp_path / "run"
        assert main(["run", *_inputs(bundle), "--sigma", "1.5", "--out", str(out)]) == 1
        assert not out.exists()

    def test_missing_inputs(self, tmp_path):
        assert main(["run", "--out", str(tmp_path / "run")]) == 1

    def test_config_file_with_flag_override(self, tmp_path, bundle):
        config = tmp_path / "run.json"
        config.write_text(json.dumps({"reranker": "none", "k": 5}), encoding="utf-8")
        out = tmp_path / "run"
        assert main(["run", *_inputs(bundle), "--config", str(config), "--out", str(out)]) == 0
        report = json.loads((out / "eval_report.json").read_text(encoding="utf-8"))
        assert report["reranker"] == "none"


class TestRun:
    def test_repeated_run_is_byte_identical(self, tmp_path, bundle):
        first, second = tmp_path / "a", tmp_path / "b"
        for out in (first, second):
            assert main(["run", *_inputs(bundle), *_train_flags(), "--out", str(out)]) == 0
        for name in ("eval_report.json", "weights.epmw", "graph.json", "rerank_results.jsonl"):
            if name == "rerank_results.jsonl":
                strip = [
                    {k: v for k, v in json.loads(line).items() if k != "refine_time_ns"}
                    for line in (first / name).read_text(encoding="utf-8").splitlines()
                ]
                again = [
                    {k: v for k, v in json.loads(line).items() if k != "refine_time_ns"}
                    for line in (second / name).read_text(encoding="utf-8").splitlines()
                ]
                assert strip == again
            else:
                assert (first / name).read_bytes() == (second / name).read_bytes(), name

    def test_run_writes_report_and_registry(self, tmp_path, bundle):
        out = tmp_path / "run"
        assert main(["run", *_inputs(bundle), *_train_flags(), "--out", str(out)]) == 0
        report = json.loads((out / "eval_report.json").read_text(encoding="utf-8"))
        assert set(report) == {"reranker", "baseline", "reranked", "failures"}
        assert set(report["reranked"]["recall_at"]) == {"1", "5", "10"}
        assert report["failures"] == []
        registry = json.loads((out / "registry.json").read_text(encoding="utf-8"))
        assert registry["partial"] is False
        assert set(registry["stages"]) == {"load", "build-constraints", "train", "rerank", "eval"}
        assert "weights.epmw" in registry["artifacts"]
        assert "train_summary.json" in registry["artifacts"]
        assert "latency.json" not in registry["artifacts"]
        latency = json.loads((out / "latency.json").read_text(encoding="utf-8"))
        assert latency["refine"]["samples"] > 0

    def test_rerun_into_same_out_keeps_registry(self, tmp_path, bundle):
        out = tmp_path / "run"
        assert main(["run", *_inputs(bundle), *_train_flags(), "--out", str(out)]) == 0
        first = (out / "registry.json").read_bytes()
        assert main(["run", *_inputs(bundle), *_train_flags(), "--out", str(out)]) == 0
        assert (out / "registry.json").read_bytes() == first

    def test_no_reranker_matches_baseline(self, tmp_path, bundle):
        out = tmp_path / "none"
        assert main(["run", *_inputs(bundle), "--reranker", "none", "--out", str(out)]) == 0
        report = json.loads((out / "eval_report.json").read_text(encoding="utf-8"))
        assert report["reranked"]["recall_at"] == report["baseline"]["recall_at"]
        assert not (out / "weights.epmw").exists()

    @pytest.mark.parametrize("reranker", ["qe", "dba", "superglobal", "adaptive"])
    def test_baseline_rerankers(self, tmp_path, bundle, reranker):
        out = tmp_path / reranker
        flags = ["--reranker", reranker, "--k-neighbors", "2", "--top-m", "10"]
        assert main(["run", *_inputs(bundle), *flags, "--out", str(out)]) == 0
        assert (out / "eval_report.json").exists()

    def test_failed_stage_leaves_partial_registry(self, tmp_path, bundle):
        out = tmp_path / "run"
        code = main(["run", *_inputs(bundle), "--constraint", "matching", "--out", str(out)])
        assert code == 1
        registry = json.loads((out / "registry.json").read_text(encoding="utf-8"))
        assert registry["partial"] is True
        assert registry["stages"]["build-constraints"]["status"] == "failed"


class TestStages:
    def test_train_rerank_eval_chain(self, tmp_path, bundle):
        train_out, rerank_out, eval_out = tmp_path / "train", tmp_path / "rerank", tmp_path / "eval"
        assert main(["train", *_inputs(bundle), *_train_flags(), "--out", str(train_out)]) == 0
        assert (train_out / "weights.epmw").stat().st_size == 16 + 4 * 4 * 16
        assert (train_out / "train_log.jsonl").exists()
        summary = json.loads((train_out / "train_summary.json").read_text(encoding="utf-8"))
        assert summary["epochs"] == len((train_out / "train_log.jsonl").read_text(encoding="utf-8").splitlines())
        assert summary["best_val_r1"] >= summary["initial_val_r1"]

        weights = str(train_out / "weights.epmw")
        assert main(["rerank", *_inputs(bundle), "--weights", weights, "--out", str(rerank_out)]) == 0
        results = rerank_out / "rerank_results.jsonl"
        assert len(results.read_text(encoding="utf-8").splitlines()) == 80

        assert main(["eval", *_inputs(bundle), "--results", str(results), "--out", str(eval_out)]) == 0
        report = json.loads((eval_out / "eval_report.json").read_text(encoding="utf-8"))
        assert report["reranked"]["n_queries"] == 80

    def test_mof_rerank_needs_weights(self, tmp_path, bundle):
        assert main(["rerank", *_inputs(bundle), "--out", str(tmp_path)]) == 1

    def test_build_constraints_from_bundle_stats(self, tmp_path, bundle):
        flags = ["--constraint", "matching", "--match-stats", str(bundle / "match_stats.csv")]
        assert main(["build-constraints", *_inputs(bundle), *flags, "--out", str(tmp_path)]) == 0
        graph = json.loads((tmp_path / "graph.json").read_text(encoding="utf-8"))
        assert graph["kind"] == "matching"

    def test_bench(self, tmp_path, bundle):
        assert main(["bench", *_inputs(bundle), "--repetitions", "2", "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "bench.json").read_text(encoding="utf-8"))
        assert report["refine"]["samples"] == 2 * 80
        assert report["k"] == 6

    def test_sweep(self, tmp_path, bundle):
        flags = ["--reranker", "none", "--ks", "3,6,500", "--ls", "2,4"]
        assert main(["sweep", *_inputs(bundle), *flags, "--out", str(tmp_path)]) == 0
        cells = json.loads((tmp_path / "sweep.json").read_text(encoding="utf-8"))["cells"]
        assert [(c["k"], c["l"]) for c in cells] == [(3, 2), (3, 4), (6, 2), (6, 4)]

    def test_synth_summary(self, bundle):
        summary = json.loads((bundle / "synth.json").read_text(encoding="utf-8"))
        assert summary["noise"] == 0.3
        assert summary["uniform_r1"] >= summary["baseline_r1"]


class TestIngest:
    def test_reingest_is_byte_identical(self, tmp_path, bundle):
        first, second = tmp_path / "a", tmp_path / "b"
        args = ["--features", str(bundle / "db.epfv"), "--metadata", str(bundle / "db_meta.jsonl")]
        assert main(["ingest", *args, "--out", str(first)]) == 0
        again = ["--features", str(first / "db.epfv"), "--metadata", str(first / "db_meta.jsonl")]
        assert main(["ingest", *again, "--out", str(second)]) == 0
        assert (first / "db.epfv").read_bytes() == (second / "db.epfv").read_bytes()
        assert (first / "db_meta.jsonl").read_bytes() == (second / "db_meta.jsonl").read_bytes()
        assert load_features(first / "db.epfv").count == 36

    def test_count_mismatch(self, tmp_path, bundle):
        args = ["--features", str(bundle / "db.epfv"), "--metadata", str(bundle / "queries_meta.jsonl")]
        assert main(["ingest", *args, "--out", str(tmp_path)]) == 1

    def test_corrupt_features(self, tmp_path):
        bad = tmp_path / "bad.epfv"
        bad.write_bytes(b"junk")
        meta = tmp_path / "meta.jsonl"
        meta.write_text('{"id": "a"}\n', encoding="utf-8")
        assert main(["ingest", "--features", str(bad), "--metadata", str(meta), "--out", str(tmp_path)]) == 1
