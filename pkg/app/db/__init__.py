import contextlib
import json
import logging
from pathlib import Path
from typing import Iterator

from app.api.schemas import DiagnosticsRecord, ExperimentSummary
from app.config import settings
from app.db.snapshots import write_snapshot
from app.services.model import PhaseState
from app.services.reporting import generate_series_csv, generate_summary_json

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class RunArtifacts:
    """Files of one run inside its directory."""

    def __init__(self, directory: Path):
        self.directory = directory
        self.written: list[Path] = []

    def _record(self, path: Path) -> Path:
        self.written.append(path)
        return path

    def snapshot(self, state: PhaseState, label: str) -> Path:
        return self._record(write_snapshot(state, self.directory / f"{label}.snap"))

    def series(self, record: DiagnosticsRecord, label: str = "series") -> Path:
        path = self.directory / f"{label}.csv"
        path.write_bytes(generate_series_csv(record).getvalue())
        return self._record(path)

    def summary(self, summary: ExperimentSummary) -> Path:
        path = self.directory / "summary.json"
        path.write_text(generate_summary_json(summary) + "\n")
        return self._record(path)

    def failure(self, exc: BaseException) -> Path:
        path = self.directory / "failure.json"
        path.write_text(json.dumps({"error": type(exc).__name__, "message": str(exc)}, indent=2) + "\n")
        return self._record(path)


class ArtifactStore:
    def __init__(self, root: str | Path | None = None):
        self.root = Path(root or settings.OUTPUT_DIR)

    @contextlib.contextmanager
    def session(self, name: str) -> Iterator[RunArtifacts]:
        """
        Run directory `root/name`. Files written before an exception are kept and a
        failure note is added next to them before the exception propagates.
        """
        directory = self.root / name
        directory.mkdir(parents=True, exist_ok=True)
        artifacts = RunArtifacts(directory)
        try:
            yield artifacts
        except Exception as exc:
            artifacts.failure(exc)
            logger.error(f"Run '{name}' failed, keeping {len(artifacts.written)} artifacts in {directory}")
            raise
        else:
            logger.info(f"Run '{name}' wrote {len(artifacts.written)} artifacts to {directory}")
