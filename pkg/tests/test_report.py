import numpy as np
import pytest

from app.core.images import ImageTensor
from app.workflows import layout
from app.workflows.experiment import load_config
from app.workflows.manifest import RunContext, write_text_atomic
from app.workflows.report import _fmt, class_histogram, write_csv
from app.workflows.runner import run_stage


@pytest.fixture
def ctx(mini_dataset, tmp_path):
    context = RunContext.open(load_config(mini_dataset, output_dir=tmp_path / "run"))
    yield context
    context.db.dispose()


class TestFormatting:
    @pytest.mark.parametrize(
        "value,text",
        [(1.5, "1.500000"), (float("inf"), "inf"), (float("-inf"), "-inf"), (float("nan"), "nan"),
         (None, ""), (3, "3"), ("ship", "ship")],
    )
    def test_fmt(self, value, text):
        assert _fmt(value) == text

    def test_csv_is_stable(self, tmp_path):
        rows = [{"model": "srgan", "psnr_mean": 31.25, "count": 4}, {"model": "bicubic", "psnr_mean": float("inf")}]
        fields = ["model", "count", "psnr_mean"]
        first = write_csv(tmp_path / "a.csv", rows, fields).read_bytes()
        assert first == write_csv(tmp_path / "b.csv", rows, fields).read_bytes()
        assert first.decode().splitlines() == ["model,count,psnr_mean", "srgan,4,31.250000", "bicubic,,inf"]

    def test_atomic_write_leaves_no_temporary(self, tmp_path):
        path = write_text_atomic("hello\n", tmp_path / "out" / "summary.txt")
        assert path.read_text() == "hello\n"
        assert list(path.parent.iterdir()) == [path]


class TestClassHistogram:
    def test_pooled_counts_and_means(self):
        dark = ImageTensor(np.full((3, 2, 2), 10.0))
        light = ImageTensor(np.full((3, 2, 2), 20.0))
        hist = class_histogram([dark, light])
        assert hist.pixel_count == 8
        assert hist.means == (15.0, 15.0, 15.0)
        assert hist.counts[1, 10] == 4 and hist.counts[1, 20] == 4
        assert hist.counts.sum() == 24

    def test_black_class_is_a_spike_at_zero(self):
        hist = class_histogram([ImageTensor(np.zeros((3, 4, 4))) for _ in range(3)])
        np.testing.assert_array_equal(hist.counts[:, 0], [48, 48, 48])
        assert hist.counts[:, 1:].sum() == 0
        assert hist.means == (0.0, 0.0, 0.0)


class TestReportStage:
    def test_missing_stages_are_annotated(self, ctx):
        assert run_stage(ctx, "report") == "completed"
        summary = (ctx.path(layout.REPORT) / "summary.txt").read_text()
        assert "(stage 'metrics' has not completed)" in summary
        assert "(stage 'eval-classifier' has not completed)" in summary
        assert f"config {ctx.config_hash}" in summary
        assert ctx.details("report") == {"sections": []}

    def test_detection_and_histograms(self, ctx):
        run_stage(ctx, "tile")
        run_stage(ctx, "eval-detection")
        run_stage(ctx, "report")
        out = ctx.path(layout.REPORT)

        lines = (out / "detection.csv").read_text().splitlines()
        assert lines[0] == "class,ap,tp,fp,gt"
        assert lines[1].startswith("ship,")
        assert lines[-1].startswith("mAP,")

        summary = (out / "summary.txt").read_text()
        assert "mAP" in summary
        assert "agricultural:" in summary
        assert (out / "panels" / "histogram_industrial.png").exists()
        assert ctx.details("report") == {"sections": ["eval-detection"]}

    def test_report_is_always_rerun(self, ctx):
        run_stage(ctx, "report")
        assert run_stage(ctx, "report") == "completed"
