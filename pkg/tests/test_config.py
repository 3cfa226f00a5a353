# SPDX-License-Identifier: GPL-3.0-only

import json

import pytest

from config import RunConfig, defaults_from_ini, load_run_config
from errors import ConfigError
from reranker_interfaces import read_defaults, read_manifest


def _write(path, payload):
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


class TestRunConfig:
    def test_ini_defaults_match_dataclass(self):
        assert RunConfig(**defaults_from_ini(read_defaults())) == RunConfig()

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"sigma": 1.5},
            {"sigma": 0.0},
            {"delta": 1.0},
            {"k": 0},
            {"threads": -1},
            {"constraint": "wifi"},
            {"reranker": "bm25"},
            {"recall_ks": (0, 5)},
            {"learning_rate": -0.1},
            {"beta": 2.0},
        ],
    )
    def test_invalid_values(self, kwargs):
        with pytest.raises(ConfigError):
            RunConfig(**kwargs)

    def test_overrides_skip_none(self):
        cfg = RunConfig().with_overrides(k=20, l=None)
        assert (cfg.k, cfg.l) == (20, 8)

    def test_override_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            RunConfig().with_overrides(bogus=1)

    def test_overrides_are_validated(self):
        with pytest.raises(ConfigError, match="sigma"):
            RunConfig().with_overrides(sigma=1.5)

    def test_sub_configs(self):
        cfg = RunConfig(learning_rate=0.01, hinge=True, beta=0.4, top_m=7)
        train = cfg.to_train_config()
        assert (train.learning_rate, train.hinge) == (0.01, True)
        baseline = cfg.to_baseline_config()
        assert (baseline.beta, baseline.top_m) == (0.4, 7)

    def test_to_dict_is_json_ready(self):
        payload = RunConfig().to_dict()
        assert payload["recall_ks"] == [1, 5, 10]
        json.dumps(payload)


class TestIniDefaults:
    def test_renamed_keys(self):
        values = defaults_from_ini({"constraints": {"kind": "timestamp"}, "evaluation": {"epsilon_m": "40"}})
        assert values == {"constraint": "timestamp", "gt_epsilon_m": 40.0}

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="colour"):
            defaults_from_ini({"retrieval": {"colour": "red"}})

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="'k'"):
            defaults_from_ini({"retrieval": {"k": "ten"}})

    def test_bool_and_list(self):
        values = defaults_from_ini({"training": {"hinge": "True"}, "evaluation": {"recall_ks": "1, 20"}})
        assert values == {"hinge": True, "recall_ks": (1, 20)}

    def test_manifest_names_package(self):
        package = read_manifest()["package"]
        assert package["name"] == "embodied-rerank"
        assert "version" in package


class TestLoadRunConfig:
    def test_relative_paths_resolve_against_file(self, tmp_path):
        (tmp_path / "conf").mkdir()
        path = _write(tmp_path / "conf" / "run.json", {"db_features": "data/db.epfv", "k": 5})
        cfg = load_run_config(path)
        assert cfg.db_features == str(tmp_path.resolve() / "conf" / "data" / "db.epfv")
        assert cfg.k == 5

    def test_absolute_path_kept(self, tmp_path):
        target = str(tmp_path / "abs.epfv")
        cfg = load_run_config(_write(tmp_path / "run.json", {"query_features": target}))
        assert cfg.query_features == target

    def test_precedence(self, tmp_path):
        path = _write(tmp_path / "run.json", {"k": 5, "l": 4})
        cfg = load_run_config(path, defaults={"k": 3, "beta": 0.3}, overrides={"l": 6})
        assert (cfg.k, cfg.l, cfg.beta) == (5, 6, 0.3)

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError, match="extra"):
            load_run_config(_write(tmp_path / "run.json", {"extra": 1}))

    @pytest.mark.parametrize(
        "payload", [{"k": "10"}, {"k": 1.5}, {"sigma": "0.5"}, {"hinge": 1}, {"recall_ks": [1, "5"]}]
    )
    def test_wrong_types(self, tmp_path, payload):
        with pytest.raises(ConfigError):
            load_run_config(_write(tmp_path / "run.json", payload))

    def test_int_accepted_for_float(self, tmp_path):
        cfg = load_run_config(_write(tmp_path / "run.json", {"epsilon_m": 30}))
        assert cfg.epsilon_m == 30.0

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{k: 1", encoding="utf-8")
        with pytest.raises(ConfigError, match="JSON"):
            load_run_config(path)

    def test_not_an_object(self, tmp_path):
        with pytest.raises(ConfigError, match="object"):
            load_run_config(_write(tmp_path / "run.json", [1, 2]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_run_config(tmp_path / "none.json")

    def test_invalid_sigma_in_file(self, tmp_path):
        with pytest.raises(ConfigError, match="sigma"):
            load_run_config(_write(tmp_path / "run.json", {"sigma": 1.5}))
