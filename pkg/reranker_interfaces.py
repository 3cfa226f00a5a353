# SPDX-License-Identifier: GPL-3.0-only

"""
Common interface of every re-ranking method, plus the cached readers for the
package's ``config.ini`` and ``manifest.ini``.
"""

from abc import ABC, abstractmethod
from configparser import ConfigParser
from pathlib import Path
from typing import Any, Dict, Sequence, Tuple

from feature_store import QueryFeature
from pipeline import BatchResult, RerankResult, run_batch

_BASE_DIR = Path(__file__).resolve().parent
_ini_cache: Dict[Path, Tuple[float, Dict[str, Any]]] = {}


def read_ini(path: Path) -> Dict[str, Any]:
    """Parse an .ini file, re-reading only when it has changed on disk.

    A stat() check runs on every call; the file is only re-parsed when its
    mtime has moved since the last read.
    """
    try:
        mtime = path.stat().st_mtime
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"File not found at {path}") from exc

    cached = _ini_cache.get(path)
    if cached is not None and cached[0] == mtime:
        return cached[1]

    config = ConfigParser()
    config.read(path, encoding="utf-8")
    data = {section: dict(config[section]) for section in config.sections()}
    _ini_cache[path] = (mtime, data)
    return data


def read_manifest() -> Dict[str, Any]:
    return read_ini(_BASE_DIR / "manifest.ini")


def read_defaults() -> Dict[str, Any]:
    return read_ini(_BASE_DIR / "config.ini")


class BaseReranker(ABC):
    """Base interface: turn one query into a baseline and a re-ranked list."""

    name = ""

    @abstractmethod
    def rerank(self, q: QueryFeature) -> RerankResult:
        """
        Retrieve and re-rank candidates for one query.

        Args:
            q (QueryFeature): The unit-norm query feature.

        Returns:
            RerankResult: ``baseline`` holds plain top-K retrieval and
                ``reranked`` the method's ordering. ``refine_time_ns`` covers
                the method's own work after baseline retrieval.
        """

    def rerank_batch(self, queries: Sequence[QueryFeature], threads: int = 1) -> BatchResult:
        """
        Re-rank many queries, optionally on a thread pool.

        Args:
            queries (Sequence[QueryFeature]): Queries in output order.
            threads (int): Worker threads; 1 runs sequentially.

        Returns:
            BatchResult: Results in input order and the per-query failures.
        """
        return run_batch(self.rerank, queries, threads)
