# SPDX-License-Identifier: GPL-3.0-only

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from baselines import BaselineConfig
from constraints import CONSTRAINT_KINDS
from errors import ConfigError
from logutils import get_logger
from mof import TrainConfig
from rerankers import RERANKERS

logger = get_logger(__name__)

_PATH_FIELDS = (
    "db_features",
    "db_metadata",
    "query_features",
    "query_metadata",
    "match_stats",
    "weights",
    "out_dir",
)
_OPTIONAL_FIELDS = {"match_stats", "weights"}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_BASELINE_FIELDS = {f.name for f in fields(BaselineConfig)}

# config.ini keys whose RunConfig field has a different name
_INI_RENAMES = {
    ("constraints", "kind"): "constraint",
    ("evaluation", "epsilon_m"): "gt_epsilon_m",
}


@dataclass(frozen=True)
class RunConfig:
    db_features: str = ""
    db_metadata: str = ""
    query_features: str = ""
    query_metadata: str = ""
    match_stats: Optional[str] = None
    weights: Optional[str] = None
    out_dir: str = "runs"

    k: int = 10
    l: int = 8
    threads: int = 0

    constraint: str = "gps"
    epsilon_m: float = 25.0
    t: float = 1.0
    t_margin: float = 0.0
    sigma: float = 0.5
    delta: float = 0.8

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

    reranker: str = "mof"
    beta: float = 0.15
    k_neighbors: int = 5
    top_m: int = 100

    gt_epsilon_m: float = 25.0
    recall_ks: Tuple[int, ...] = (1, 5, 10)
    bench_repetitions: int = 10

    def __post_init__(self):
        object.__setattr__(self, "recall_ks", tuple(int(k) for k in self.recall_ks))
        _validate(self)

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Copy with every non-None override applied, validated again."""
        changes = {key: value for key, value in overrides.items() if value is not None}
        unknown = set(changes) - _field_types().keys()
        if unknown:
            raise ConfigError(f"Unknown configuration key(s): {', '.join(sorted(unknown))}")
        return replace(self, **changes)

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(**{name: getattr(self, name) for name in _TRAIN_FIELDS})

    def to_baseline_config(self) -> BaselineConfig:
        return BaselineConfig(**{name: getattr(self, name) for name in _BASELINE_FIELDS})

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["recall_ks"] = list(self.recall_ks)
        return payload


def _field_types() -> Dict[str, Any]:
    return {f.name: f.type for f in fields(RunConfig)}


def _check_positive(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if getattr(cfg, name) < 1:
            raise ConfigError(f"'{name}' must be >= 1, got {getattr(cfg, name)}")


def _check_choice(value: str, name: str, choices: Tuple[str, ...]) -> None:
    if value not in choices:
        raise ConfigError(f"'{name}' must be one of {', '.join(choices)}; got {value!r}")


def _validate(cfg: RunConfig) -> None:
    _check_positive(cfg, "k", "l", "bench_repetitions")
    if cfg.threads < 0:
        raise ConfigError(f"'threads' must be >= 0 (0 = all cores), got {cfg.threads}")
    _check_choice(cfg.constraint, "constraint", CONSTRAINT_KINDS)
    _check_choice(cfg.reranker, "reranker", RERANKERS)
    if cfg.epsilon_m < 0 or cfg.gt_epsilon_m < 0:
        raise ConfigError("GPS thresholds 'epsilon_m' and 'gt_epsilon_m' must be >= 0")
    if cfg.t <= 0:
        raise ConfigError(f"'t' must be positive, got {cfg.t}")
    if cfg.t_margin < 0:
        raise ConfigError(f"'t_margin' must be >= 0, got {cfg.t_margin}")
    if not 0.0 < cfg.sigma < 1.0:
        raise ConfigError(f"'sigma' is an inlier ratio threshold in (0, 1), got {cfg.sigma}")
    if not -1.0 < cfg.delta < 1.0:
        raise ConfigError(f"'delta' is a cosine threshold in (-1, 1), got {cfg.delta}")
    if not cfg.recall_ks or min(cfg.recall_ks) < 1:
        raise ConfigError(f"'recall_ks' must be positive integers, got {list(cfg.recall_ks)}")
    cfg.to_train_config()
    cfg.to_baseline_config()


def _coerce(name: str, value: Any) -> Any:
    kind = _field_types()[name]
    if value is None and name in _OPTIONAL_FIELDS:
        return None
    if kind in (int, "int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{name}' must be an integer, got {value!r}")
        return value
    if kind in (float, "float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{name}' must be a number, got {value!r}")
        return float(value)
    if kind in (bool, "bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"'{name}' must be true or false, got {value!r}")
        return value
    if name == "recall_ks":
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(k, int) and not isinstance(k, bool) for k in value
        ):
            raise ConfigError(f"'recall_ks' must be a list of integers, got {value!r}")
        return tuple(value)
    if not isinstance(value, str):
        raise ConfigError(f"'{name}' must be a string, got {value!r}")
    return value


def _parse_ini_value(name: str, raw: str) -> Any:
    kind = _field_types()[name]
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if kind in (bool, "bool"):
            lowered = raw.strip().lower()
            if lowered not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return lowered == "true"
        if name == "recall_ks":
            return tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError as e:
        raise ConfigError(f"config.ini value for '{name}' is invalid: {e}") from e
    return raw.strip()


def defaults_from_ini(configs: Dict[str, Dict[str, str]]) -> Dict[str, Any]:
    """Map the sections of ``config.ini`` onto RunConfig field values."""
    known = _field_types()
    values: Dict[str, Any] = {}
    for section, entries in configs.items():
        for key, raw in entries.items():
            name = _INI_RENAMES.get((section, key), key)
            if name not in known:
                raise ConfigError(f"config.ini [{section}] has unknown key '{key}'")
            values[name] = _parse_ini_value(name, raw)
    return values


def _resolve_path(raw: str, base_dir: Path) -> str:
    path = Path(raw).expanduser()
    if not path.is_absolute():
        path = base_dir / path
    return str(path)


def load_run_config(
    path: Union[str, Path],
    defaults: Optional[Dict[str, Any]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """Load, validate and return a RunConfig from a strict JSON file.

    Precedence: ``overrides`` over the file over ``defaults``. Relative paths
    in the file are resolved against the file's directory. Unknown keys and
    wrongly typed values are rejected before any computation.
    """
    path = Path(path)
    logger.debug("Loading run configuration from %s", path)
    try:
        with path.open(encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"Run configuration file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Run configuration is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("Run configuration must be a JSON object")

    unknown = set(raw) - _field_types().keys()
    if unknown:
        raise ConfigError(f"Unknown configuration key(s): {', '.join(sorted(unknown))}")

    values = dict(defaults or {})
    base_dir = path.resolve().parent
    for name, value in raw.items():
        value = _coerce(name, value)
        if name in _PATH_FIELDS and value is not None:
            value = _resolve_path(value, base_dir)
        values[name] = value

    cfg = RunConfig(**values)
    return cfg.with_overrides(**(overrides or {}))
