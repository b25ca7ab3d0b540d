import json
from datetime import datetime
from typing import Any, Dict, List, Optional

from sqlalchemy import (
    Column,
    DateTime,
    Float,
    ForeignKey,
    Integer,
    String,
    Text,
    UniqueConstraint,
    func,
)
from sqlalchemy.orm import declarative_base, relationship

Base = declarative_base()


class Run(Base):
    """One experiment configuration, identified by its config hash."""

    __tablename__ = 'runs'
    __allow_unmapped__ = True

    id: int = Column(Integer, primary_key=True)
    config_hash: str = Column(String(64), unique=True, index=True)
    tool_version: str = Column(String)
    config_json: str = Column(Text)
    created_at: datetime = Column(DateTime, default=func.now())

    # Relationships
    stages: List['StageRun'] = relationship(
        "StageRun", back_populates="run", order_by="StageRun.id", cascade="all, delete-orphan"
    )


class StageRun(Base):
    """Latest execution of one pipeline stage for a run."""

    __tablename__ = 'stage_runs'
    __allow_unmapped__ = True

    id: int = Column(Integer, primary_key=True, autoincrement=True)
    run_id: int = Column(Integer, ForeignKey('runs.id'), index=True)
    stage: str = Column(String)

    # pending | running | completed | failed | skipped
    status: str = Column(String, default="pending")
    started_at: Optional[datetime] = Column(DateTime, nullable=True)
    finished_at: Optional[datetime] = Column(DateTime, nullable=True)
    seconds: float = Column(Float, default=0.0)
    error: Optional[str] = Column(Text, nullable=True)
    details_json: str = Column(Text, default="{}")

    __table_args__ = (
        UniqueConstraint('run_id', 'stage', name='uq_run_stage'),
    )

    # Relationships
    run: Run = relationship("Run", back_populates="stages")
    artifacts: List['Artifact'] = relationship(
        "Artifact", back_populates="stage_run", order_by="Artifact.path", cascade="all, delete-orphan"
    )

    @property
    def details(self) -> Dict[str, Any]:
        return json.loads(self.details_json or "{}")

    @details.setter
    def details(self, value: Dict[str, Any]) -> None:
        self.details_json = json.dumps(value, sort_keys=True)


class Artifact(Base):
    """A file produced by a stage, stored relative to the output directory."""

    __tablename__ = 'artifacts'
    __allow_unmapped__ = True

    id: int = Column(Integer, primary_key=True)
    stage_run_id: int = Column(Integer, ForeignKey('stage_runs.id'), index=True)
    path: str = Column(String)
    kind: str = Column(String, default="file")

    # Relationships
    stage_run: StageRun = relationship("StageRun", back_populates="artifacts")
