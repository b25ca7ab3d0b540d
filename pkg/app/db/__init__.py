"""Run-manifest persistence: runs, stage executions and their artifacts."""

from .models import (
    Base,
    Run,
    StageRun,
    Artifact,
)
from .base import Database

__all__ = [
    "Database",
    "Base",
    "Run",
    "StageRun",
    "Artifact",
]
