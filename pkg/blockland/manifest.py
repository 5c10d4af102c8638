"""
Every training or evaluation run writes one ``manifest.json`` into its
run directory. The manifest is the only artifact that carries wall-clock
timestamps; all other artifacts are byte-identical for identical inputs.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

import blockland
from blockland import ArtifactError, typechecking
from blockland.util import write_json

log = logging.getLogger("blockland.manifest")

MANIFEST_NAME = "manifest.json"

STATUS_RUNNING = "running"
STATUS_COMPLETE = "complete"
STATUS_FAILED = "failed"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    """Provenance of one run.

    :attr opponent: ``{"tag": ...}`` for a scripted opponent; a checkpoint
                    adds ``"digest"`` (parameters) in training runs and
                    ``"file_digest"`` (file) in evaluations
    :attr victim: the frozen victim an adversary was trained against
    :attr artifacts: paths relative to the run directory
    """

    command: str
    config: Dict[str, Any] = field(default_factory=dict)
    level: Dict[str, Any] = field(default_factory=dict)
    seeds: List[int] = field(default_factory=list)
    opponent: Optional[Dict[str, str]] = None
    victim: Optional[Dict[str, str]] = None
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    artifacts: List[str] = field(default_factory=list)
    version: str = blockland.__version__
    status: str = STATUS_RUNNING
    error: Optional[str] = None
    details: Dict[str, Any] = field(default_factory=dict)

    def add_artifact(self, relative_path: str) -> None:
        if relative_path not in self.artifacts:
            self.artifacts.append(relative_path)

    def complete(self) -> None:
        self.status = STATUS_COMPLETE
        self.finished = _now()
        self.error = None

    def fail(self, error: BaseException) -> None:
        self.status = STATUS_FAILED
        self.finished = _now()
        self.error = f"{type(error).__name__}: {error}"

    def save(self, run_dir: typechecking.StringPathLike) -> str:
        path = os.path.join(run_dir, MANIFEST_NAME)
        write_json(path, asdict(self))
        log.info("manifest written to %s (%s)", path, self.status)
        return path

    @classmethod
    def load(cls, path: typechecking.StringPathLike) -> "RunManifest":
        """Read a manifest file, or the manifest inside a run directory.

        :raises blockland.ArtifactError: if it is missing or malformed
        """
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        try:
            with open(path, "r") as f:
                document = json.load(f)
            return cls(**document)
        except (OSError, ValueError, TypeError) as e:
            raise ArtifactError(f"cannot read manifest {path}: {e}") from None


def find_manifest(artifact_path: typechecking.StringPathLike) -> Optional[str]:
    """The manifest of the run directory holding ``artifact_path``, or None."""
    candidate = os.path.join(os.path.dirname(os.path.abspath(artifact_path)), MANIFEST_NAME)
    return candidate if os.path.isfile(candidate) else None
