"""Pipeline stages of the super-resolution experiment and the run-all driver."""

from .experiment import ExperimentConfig, config_hash, load_config
from .manifest import RunContext, StageResult, export_manifest
from .runner import STAGE_ORDER, STAGES, run_all, run_stage

__all__ = [
    "ExperimentConfig",
    "config_hash",
    "load_config",
    "RunContext",
    "StageResult",
    "export_manifest",
    "STAGE_ORDER",
    "STAGES",
    "run_all",
    "run_stage",
]
