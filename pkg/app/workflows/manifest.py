"""Run context and the run manifest (SQLite store plus an atomic JSON export)."""

import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

from app import __version__
from app.core.config import settings
from app.core.errors import StagePrerequisiteError
from app.db import Artifact, Database, Run, StageRun
from app.workflows.experiment import ExperimentConfig, config_hash

logger = logging.getLogger(__name__)

MANIFEST_JSON = "manifest.json"


@dataclass
class StageResult:
    """What a stage function hands back to the runner."""

    artifacts: List[Path] = field(default_factory=list)
    details: Dict[str, Any] = field(default_factory=dict)
    status: str = "completed"


@dataclass
class RunContext:
    """Everything a stage needs: validated config, output directory and manifest store."""

    config: ExperimentConfig
    db: Database
    output: Path
    config_hash: str
    force: bool = False

    @classmethod
    def open(cls, config: ExperimentConfig, force: bool = False) -> "RunContext":
        output = Path(config.output_dir)
        db = Database.in_directory(output, settings.database_name)
        digest = config_hash(config)
        with db.session() as session:
            run = session.query(Run).filter(Run.config_hash == digest).first()
            if run is None:
                session.add(Run(
                    config_hash=digest,
                    tool_version=__version__,
                    config_json=config.model_dump_json(exclude={"output_dir", "jobs"}),
                ))
                logger.info(f"New run {digest[:12]} in {output}")
        return cls(config, db, output, digest, force)

    def path(self, *parts: Union[str, Path]) -> Path:
        return self.output.joinpath(*parts)

    def relative(self, path: Union[str, Path]) -> str:
        path = Path(path)
        try:
            return path.resolve().relative_to(self.output.resolve()).as_posix()
        except ValueError:
            return str(path)

    def _run_id(self, session) -> int:
        return session.query(Run.id).filter(Run.config_hash == self.config_hash).scalar()

    def stage_record(self, stage: str) -> Optional[StageRun]:
        with self.db.session() as session:
            record = (
                session.query(StageRun)
                .filter(StageRun.run_id == self._run_id(session), StageRun.stage == stage)
                .first()
            )
            if record is not None:
                record.artifacts  # load before the session closes
            return record

    def completed(self, stage: str) -> bool:
        """Stage finished for this config and every artifact it listed still exists."""
        record = self.stage_record(stage)
        if record is None or record.status != "completed":
            return False
        return all(self.path(a.path).exists() for a in record.artifacts)

    def details(self, stage: str) -> Dict[str, Any]:
        record = self.stage_record(stage)
        return record.details if record is not None else {}

    def require(self, stage: str) -> None:
        """Raise unless ``stage`` has completed with its artifacts in place."""
        if not self.completed(stage):
            record = self.stage_record(stage)
            state = record.status if record is not None else "never run"
            raise StagePrerequisiteError(stage, f"outputs of stage '{stage}' ({state})")


def _upsert(session, run_id: int, stage: str) -> StageRun:
    record = (
        session.query(StageRun)
        .filter(StageRun.run_id == run_id, StageRun.stage == stage)
        .first()
    )
    if record is None:
        record = StageRun(run_id=run_id, stage=stage)
        session.add(record)
    return record


def begin_stage(ctx: RunContext, stage: str) -> None:
    with ctx.db.session() as session:
        record = _upsert(session, ctx._run_id(session), stage)
        record.status = "running"
        record.started_at = datetime.now()
        record.finished_at = None
        record.error = None
        record.artifacts = []


def finish_stage(ctx: RunContext, stage: str, result: StageResult, seconds: float) -> None:
    with ctx.db.session() as session:
        record = _upsert(session, ctx._run_id(session), stage)
        record.status = result.status
        record.finished_at = datetime.now()
        record.seconds = seconds
        record.details = result.details
        record.artifacts = [
            Artifact(path=ctx.relative(p), kind="dir" if Path(p).is_dir() else "file")
            for p in sorted(set(result.artifacts))
        ]


def fail_stage(ctx: RunContext, stage: str, error: str, seconds: float = 0.0) -> None:
    with ctx.db.session() as session:
        record = _upsert(session, ctx._run_id(session), stage)
        record.status = "failed"
        record.finished_at = datetime.now()
        record.seconds = seconds
        record.error = error


def mark_stages(ctx: RunContext, stages: Iterable[str], status: str, reason: str = "") -> None:
    """Set the status of existing or new stage rows (``skipped``, ``stale``)."""
    with ctx.db.session() as session:
        run_id = ctx._run_id(session)
        for stage in stages:
            record = _upsert(session, run_id, stage)
            record.status = status
            record.error = reason or None


def manifest_dict(ctx: RunContext) -> Dict[str, Any]:
    with ctx.db.session() as session:
        run = session.query(Run).filter(Run.config_hash == ctx.config_hash).one()
        return {
            "config_hash": run.config_hash,
            "tool_version": run.tool_version,
            "output_dir": str(ctx.output),
            "stages": {
                s.stage: {
                    "status": s.status,
                    "seconds": round(s.seconds or 0.0, 3),
                    "started_at": s.started_at.isoformat() if s.started_at else None,
                    "finished_at": s.finished_at.isoformat() if s.finished_at else None,
                    "error": s.error,
                    "details": s.details,
                    "artifacts": [a.path for a in s.artifacts],
                }
                for s in run.stages
            },
        }


def write_json_atomic(data: Any, path: Union[str, Path]) -> Path:
    return write_text_atomic(json.dumps(data, indent=2, sort_keys=True) + "\n", path)


def export_manifest(ctx: RunContext) -> Path:
    return write_json_atomic(manifest_dict(ctx), ctx.path(MANIFEST_JSON))


def write_text_atomic(text: str, path: Union[str, Path]) -> Path:
    """Write to a temporary sibling, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
    return path
