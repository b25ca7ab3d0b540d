import json
from pathlib import Path

import pytest

from app.core.errors import StagePrerequisiteError
from app.core.resample import NEAREST
from app.core.srgan import checkpoints_equal, load_checkpoint
from app.workflows import layout
from app.workflows.experiment import (
    ClassifierStageConfig,
    DatasetConfig,
    ExperimentConfig,
    SeedsConfig,
    load_config,
)
from app.workflows.manifest import MANIFEST_JSON, RunContext
from app.workflows.runner import STAGE_ORDER, ancestors, dependents, requirements, run_all, run_stage


def experiment(sources=None) -> ExperimentConfig:
    classifier = None if sources is None else ClassifierStageConfig(data=Path("ships"), sources=sources)
    return ExperimentConfig(
        seeds=SeedsConfig(split=0, srgan=1, classifier=2),
        dataset=DatasetConfig(scenes={"urban": Path("urban")}),
        classifier=classifier,
    )


@pytest.fixture
def ctx(mini_dataset, tmp_path):
    context = RunContext.open(load_config(mini_dataset, output_dir=tmp_path / "run"))
    yield context
    context.db.dispose()


class TestDag:
    def test_classifier_needs_sr_only_for_sr_sources(self):
        assert requirements(experiment(["raw", "sr"]), "train-classifier") == ["train-sr"]
        assert requirements(experiment(["raw", "scaled"]), "train-classifier") == []
        assert requirements(experiment(["sr"]), "eval-classifier") == ["train-classifier", "train-sr"]

    def test_unconfigured_classifier_needs_nothing(self):
        assert requirements(experiment(), "eval-classifier") == []

    def test_dependents_of_degrade(self):
        assert dependents(experiment(["raw", "sr"]), "degrade") == [
            "scale", "train-sr", "infer-sr", "metrics", "sweep", "train-classifier", "eval-classifier",
        ]
        assert dependents(experiment(["raw"]), "degrade") == ["scale", "train-sr", "infer-sr", "metrics", "sweep"]

    def test_ancestors_of_metrics(self):
        assert ancestors(experiment(), "metrics") == ["tile", "degrade", "scale", "train-sr", "infer-sr", "metrics"]

    def test_detection_stands_alone(self):
        assert ancestors(experiment(), "eval-detection") == ["eval-detection"]
        assert dependents(experiment(), "eval-detection") == []

    def test_report_runs_last(self):
        assert STAGE_ORDER[-1] == "report"


class TestRunStage:
    def test_prerequisite_is_enforced(self, ctx):
        with pytest.raises(StagePrerequisiteError) as info:
            run_stage(ctx, "degrade")
        assert info.value.stage == "tile"
        assert ctx.stage_record("degrade") is None

    def test_completed_stage_is_cached(self, ctx):
        assert run_stage(ctx, "eval-detection") == "completed"
        assert run_stage(ctx, "eval-detection") == "cached"
        details = ctx.details("eval-detection")
        assert 0.0 < details["mean_ap"] <= 1.0
        assert details["classes"] == 1

    def test_force_reruns(self, ctx):
        run_stage(ctx, "eval-detection")
        ctx.force = True
        assert run_stage(ctx, "eval-detection") == "completed"

    def test_missing_artifact_invalidates_the_stage(self, ctx):
        run_stage(ctx, "eval-detection")
        layout.results_path(ctx, "detection.json").unlink()
        assert not ctx.completed("eval-detection")
        assert run_stage(ctx, "eval-detection") == "completed"

    def test_manifest_export(self, ctx):
        run_stage(ctx, "eval-detection")
        manifest = json.loads(ctx.path(MANIFEST_JSON).read_text())
        assert manifest["config_hash"] == ctx.config_hash
        stage = manifest["stages"]["eval-detection"]
        assert stage["status"] == "completed"
        assert stage["artifacts"] == ["results/detection.json"]

    def test_detection_without_section_is_skipped(self, mini_dataset, tmp_path):
        config = load_config(mini_dataset, output_dir=tmp_path / "run").model_copy(update={"detection": None})
        context = RunContext.open(config)
        try:
            assert run_stage(context, "eval-detection") == "skipped"
            assert context.details("eval-detection") == {"reason": "no detection section"}
        finally:
            context.db.dispose()

    def test_rerunning_a_stage_marks_dependents_stale(self, ctx):
        assert run_stage(ctx, "tile") == "completed"
        assert ctx.details("tile")["classes"]["agricultural"] == {
            "scenes": 8, "skipped": 0, "train": 12, "test": 4,
        }
        assert len(list(layout.chips_root(ctx, "test").glob("*/*.png"))) == 8

        assert run_stage(ctx, "degrade") == "completed"
        assert ctx.completed("degrade")
        ctx.force = True
        run_stage(ctx, "tile")
        assert ctx.stage_record("degrade").status == "stale"
        assert not ctx.completed("degrade")

    def test_failed_stage_is_recorded(self, ctx):
        broken = ctx.config.model_copy(update={"dataset": ctx.config.dataset.model_copy(update={"tile": 4000})})
        context = RunContext(broken, ctx.db, ctx.output, ctx.config_hash)
        with pytest.raises(Exception):
            run_stage(context, "tile")
        assert ctx.stage_record("tile").status == "failed"
        assert "DatasetError" in ctx.stage_record("tile").error


class TestRunAll:
    def test_target_limits_the_stages(self, ctx):
        assert run_all(ctx, target="eval-detection") == {"eval-detection": "completed"}

    @pytest.mark.slow
    def test_whole_experiment_then_cached_rerun(self, ctx):
        outcome = run_all(ctx)
        assert list(outcome) == STAGE_ORDER
        assert set(outcome.values()) == {"completed"}
        summary = (ctx.path(layout.REPORT) / "summary.txt").read_text()
        assert "has not completed" not in summary

        again = run_all(ctx)
        assert again["report"] == "completed"
        assert {s: v for s, v in again.items() if s != "report"} == {s: "cached" for s in STAGE_ORDER[:-1]}

    @pytest.mark.slow
    def test_identical_configs_give_identical_reports(self, mini_dataset, tmp_path):
        reports = []
        for name in ("first", "second"):
            context = RunContext.open(load_config(mini_dataset, output_dir=tmp_path / name))
            try:
                run_all(context)
            finally:
                context.db.dispose()
            out = tmp_path / name / layout.REPORT
            reports.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
            reports[-1]["models"] = {
                p.name: p.read_bytes() for p in sorted((tmp_path / name / layout.MODELS).glob("*.ckpt"))
            }
        assert "metrics.csv" in reports[0]
        assert reports[0] == reports[1]

    @pytest.mark.slow
    def test_new_degradation_retrains_instead_of_resuming(self, mini_dataset, tmp_path):
        def train_into(config):
            context = RunContext.open(config)
            try:
                run_all(context, target="train-sr")
            finally:
                context.db.dispose()
            return {name: load_checkpoint(layout.model_path(context, name)) for name in config.sr_models()}

        keys = load_config(mini_dataset, output_dir=tmp_path / "shared")
        before = train_into(keys)

        nearest = keys.model_copy(update={"degradation": NEAREST})
        reused = train_into(nearest)
        fresh = train_into(nearest.model_copy(update={"output_dir": tmp_path / "fresh"}))

        for name in nearest.sr_models():
            assert reused[name].data_key != before[name].data_key
            assert reused[name].data_key == fresh[name].data_key
            assert checkpoints_equal(reused[name], fresh[name])
            assert not checkpoints_equal(reused[name], before[name])
