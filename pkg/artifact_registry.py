# SPDX-License-Identifier: GPL-3.0-only

import json
from pathlib import Path
from typing import Dict, Optional, Union

from logutils import get_logger
from utils import sha256_file

logger = get_logger(__name__)

DEFAULT_REGISTRY_FILENAME = "registry.json"


class ArtifactRegistry:
    """Tracks the stages and artifacts of one run in ``<out>/registry.json``.

    The registry stays flagged ``partial`` until ``complete`` is called, so
    artifacts left by a failed run are recognisable.
    """

    def __init__(self, out_dir: Union[str, Path], registry_filename: str = DEFAULT_REGISTRY_FILENAME):
        self.out_dir = Path(out_dir).expanduser()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.registry_path = self.out_dir / registry_filename

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def read(self) -> dict:
        if not self.registry_path.exists():
            return {}
        return json.loads(self.registry_path.read_text(encoding="utf-8"))

    def write(self, data: dict) -> None:
        self.registry_path.write_text(
            json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    def update(self, **kwargs) -> None:
        data = self.read()
        data.update(kwargs)
        self.write(data)

    def start(self, command: str, config: Optional[dict] = None) -> None:
        self.write(
            {"command": command, "config": config or {}, "partial": True, "stages": {}, "artifacts": {}}
        )

    def stage(self, name: str, status: str, error: Optional[str] = None) -> None:
        data = self.read()
        entry: Dict[str, str] = {"status": status}
        if error is not None:
            entry["error"] = error
        data.setdefault("stages", {})[name] = entry
        self.write(data)
        logger.debug("Stage %s: %s", name, status)

    def record(self, name: str, digest: Optional[str] = None) -> Path:
        """Register an artifact already written under the run directory.

        ``digest`` replaces the file hash for artifacts whose bytes carry
        run-dependent fields such as timings.
        """
        artifact = self.path(name)
        if not artifact.exists():
            raise FileNotFoundError(f"artifact {artifact} was not written")
        data = self.read()
        data.setdefault("artifacts", {})[name] = digest or sha256_file(artifact)
        self.write(data)
        return artifact

    def complete(self) -> None:
        self.update(partial=False)
        logger.info("Run complete: %s", self.out_dir)
