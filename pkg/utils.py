# SPDX-License-Identifier: GPL-3.0-only

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Iterator, Union

from errors import ArgumentError


def require(kwargs: dict, *fields: str) -> tuple:
    """Ensure required keyword arguments are present, raising ArgumentError otherwise."""
    missing = [f for f in fields if kwargs.get(f) is None]
    if missing:
        raise ArgumentError(f"Missing required parameter(s): {', '.join(missing)}")
    return tuple(kwargs[f] for f in fields)


def check_index(index: int, size: int, what: str = "row") -> int:
    """Return ``index`` as int if it addresses one of ``size`` items."""
    if not 0 <= int(index) < size:
        raise ArgumentError(f"{what} index {index} out of range [0, {size})")
    return int(index)


def dumps_compact(payload: Any) -> str:
    """Serialize to the compact, key-ordered JSON used by every artifact."""
    return json.dumps(
        payload, ensure_ascii=False, separators=(",", ":"), sort_keys=True
    )


def write_jsonl(path: Union[str, Path], records: Iterable[Any]) -> int:
    """Write one compact JSON document per line; return the record count."""
    count = 0
    with Path(path).open("w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(dumps_compact(record) + "\n")
            count += 1
    return count


def read_jsonl(path: Union[str, Path]) -> Iterator[Any]:
    with Path(path).open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno} is not valid JSON: {e}") from e


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
