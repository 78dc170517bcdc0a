"""
Run manifests: a JSON record written beside every CLI artifact.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .formats import file_digest

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "HAND_KD_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "runs"
MANIFEST_SUFFIX = ".manifest.json"


def default_output_dir() -> Path:
    """`$HAND_KD_OUTPUT_DIR` when set, else `./runs`."""
    return Path(os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR)


def _utc_now() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


@dataclass
class RunManifest:
    """
    What produced an artifact: the command, its resolved options, digests of every input
    file, the tool version and the seed. Two manifests that agree outside `timestamp`
    describe runs whose scientific outputs are byte-identical.
    """

    command: str
    options: Dict[str, Any]
    inputs: Dict[str, str] = field(default_factory=dict)
    version: str = ""
    seed: Optional[int] = None
    timestamp: str = field(default_factory=_utc_now)
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.version:
            from . import __version__
            self.version = __version__

    def add_input(self, name: str, path: Union[str, Path]) -> None:
        self.inputs[name] = file_digest(path)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "options": {k: _jsonable(v) for k, v in self.options.items()},
            "inputs": dict(self.inputs),
            "version": self.version,
            "seed": self.seed,
            "timestamp": self.timestamp,
            "extra": {k: _jsonable(v) for k, v in self.extra.items()},
        }

    def scientific_view(self) -> Dict[str, Any]:
        """Everything except the timestamp and timing extras."""
        view = self.to_dict()
        view.pop("timestamp")
        view["extra"] = {k: v for k, v in view["extra"].items() if not k.startswith("timing")}
        return view

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        logger.debug(f"Wrote manifest {path}")
        return path

    def write_beside(self, artifact: Union[str, Path]) -> Path:
        artifact = Path(artifact)
        return self.write(artifact.with_name(artifact.name + MANIFEST_SUFFIX))

    @classmethod
    def read(cls, path: Union[str, Path]) -> "RunManifest":
        data = json.loads(Path(path).read_text())
        return cls(
            command=data["command"],
            options=data.get("options", {}),
            inputs=data.get("inputs", {}),
            version=data.get("version", ""),
            seed=data.get("seed"),
            timestamp=data.get("timestamp", ""),
            extra=data.get("extra", {}),
        )


def _jsonable(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if hasattr(value, "value") and not isinstance(value, (int, float, str, bool)):
        return value.value
    return value


__all__ = ["RunManifest", "default_output_dir", "OUTPUT_DIR_ENV"]
