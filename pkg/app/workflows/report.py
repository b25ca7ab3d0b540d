"""Report bundle: CSV tables, a plain-text summary and PNG panels.

Only stages that completed for the current config contribute; every other
section is annotated as missing. CSV content depends only on the stage results,
so identical results give byte-identical CSV files.
"""

import csv
import logging
import math
import platform
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app import __version__  # noqa: E402
from app.core.classifier import EvalResult  # noqa: E402
from app.core.detection import DetectionReport  # noqa: E402
from app.core.images import ImageTensor, to_uint8  # noqa: E402
from app.core.metrics import RgbHistogram, SweepTable, abs_difference_matrix, rgb_histogram  # noqa: E402
from app.core.tiling import read_chips  # noqa: E402
from app.workflows import layout  # noqa: E402
from app.workflows.classify import EVAL_RESULTS  # noqa: E402
from app.workflows.evaluate import BASELINE_MODEL  # noqa: E402
from app.workflows.manifest import RunContext, StageResult, write_text_atomic  # noqa: E402

METRIC_FIELDS = ["model", "dataset", "kernel", "count", "skipped", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"]
CLASSIFIER_FIELDS = ["source", "accuracy", "count", "tn", "fp", "fn", "tp", "misclassified"]
DETECTION_FIELDS = ["class", "ap", "tp", "fp", "gt"]

FAILURE_LIMIT = 8


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        return f"{value:.6f}"
    return "" if value is None else str(value)


def write_csv(path: Path, rows: Sequence[Dict[str, Any]], fields: Sequence[str]) -> Path:
    """Write rows with fixed float formatting so output is stable."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row.get(name)) for name in fields])
    return path


def _image_grid(cells: List[List[Tuple[str, Optional[ImageTensor]]]], path: Path, title: str = "") -> Path:
    rows, cols = len(cells), max(len(r) for r in cells)
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.3 * rows), squeeze=False)
    for r, row in enumerate(cells):
        for c in range(cols):
            ax = axes[r][c]
            ax.axis("off")
            if c < len(row) and row[c][1] is not None:
                label, image = row[c]
                ax.imshow(to_uint8(image), interpolation="nearest")
                ax.set_title(label, fontsize=7)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def class_histogram(chips: Sequence[ImageTensor]) -> RgbHistogram:
    """RGB histogram pooled over all chips of a class."""
    parts = [rgb_histogram(c) for c in chips]
    counts = np.sum([p.counts for p in parts], axis=0)
    pixels = sum(p.pixel_count for p in parts)
    means = tuple(
        float(sum(p.means[ch] * p.pixel_count for p in parts) / pixels) for ch in range(counts.shape[0])
    )
    return RgbHistogram(counts=counts, means=means)


def histogram_panel(histogram: RgbHistogram, path: Path, title: str) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3))
    for channel, color in enumerate(("red", "green", "blue")):
        ax.plot(np.arange(256), histogram.counts[channel], color=color, linewidth=1,
                label=f"{color} (mean {histogram.means[channel]:.1f})")
    ax.set_xlim(0, 255)
    ax.set_xlabel("8-bit value")
    ax.set_ylabel("pixels")
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def _loss_panel(loss_csv: Path, path: Path, title: str) -> Optional[Path]:
    with loss_csv.open(encoding="utf-8") as f:
        rows = [r for r in csv.DictReader(f)]
    if not rows:
        return None
    it = [int(r["iter"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3))
    for key in ("d_loss", "content"):
        ax.plot(it, [float(r[key]) for r in rows], label=key, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


class _Report:
    def __init__(self, ctx: RunContext) -> None:
        self.ctx = ctx
        self.out = layout.reset_dir(ctx.path(layout.REPORT))
        self.panels = self.out / "panels"
        self.lines: List[str] = []
        self.artifacts: List[Path] = []
        self.sections: List[str] = []

    def section(self, heading: str) -> None:
        self.lines += ["", heading, "-" * len(heading)]

    def missing(self, stage: str) -> None:
        record = self.ctx.stage_record(stage)
        if record is not None and record.status == "skipped":
            self.lines.append(f"(stage '{stage}' skipped: {record.error or record.details.get('reason', '')})")
        else:
            self.lines.append(f"(stage '{stage}' has not completed)")

    def panel(self, name: str, render: Callable[[], Optional[Path]]) -> None:
        if not self.ctx.config.report.panels:
            return
        try:
            path = render()
        except Exception as e:
            logging.warning(f"Panel {name} failed: {e}")
            self.lines.append(f"(panel {name} could not be rendered: {e})")
            return
        if path is not None:
            self.artifacts.append(path)

    def csv(self, name: str, rows, fields) -> None:
        self.artifacts.append(write_csv(self.out / name, rows, fields))


def _quality(rep: _Report) -> None:
    ctx = rep.ctx
    rep.section("Image quality on test chips (PSNR dB / SSIM)")
    if not ctx.completed("metrics"):
        rep.missing("metrics")
        return
    table = SweepTable.model_validate_json(layout.results_path(ctx, "metrics.json").read_text(encoding="utf-8"))
    rep.csv("metrics.csv", table.rows(), METRIC_FIELDS)
    rep.lines.append(table.format_table())
    rep.sections.append("metrics")


def _sweeps(rep: _Report) -> None:
    ctx = rep.ctx
    rep.section("Degradation-kernel sweep")
    if not ctx.completed("sweep"):
        rep.missing("sweep")
        return
    for path in sorted(layout.results_path(ctx, "").glob("sweep_*.json")):
        table = SweepTable.model_validate_json(path.read_text(encoding="utf-8"))
        rep.csv(f"{path.stem}.csv", table.rows(), METRIC_FIELDS)
        rep.lines += [table.format_table(), ""]
    rep.sections.append("sweep")


def _training(rep: _Report) -> None:
    ctx = rep.ctx
    rep.section("SRGAN training")
    if not ctx.completed("train-sr"):
        rep.missing("train-sr")
        return
    for name, info in sorted(ctx.details("train-sr").get("models", {}).items()):
        final = info.get("final") or {}
        rep.lines.append(
            f"{name}: {info['iterations']} iterations on {info['pairs']} pairs, "
            f"{info['parameters']:,} generator parameters, final content {final.get('content', float('nan')):.5f}"
        )
        loss_csv = layout.loss_log_path(ctx, name)
        if loss_csv.exists():
            rep.panel(f"loss_{name}", lambda n=name, p=loss_csv: _loss_panel(p, rep.panels / f"loss_{n}.png", f"{n} losses"))
        previews = sorted(layout.previews_dir(ctx, name).glob("iter_*.png"))
        if previews:
            def strip(n=name, files=previews):
                from app.core.images import load_image
                cells = [[(p.stem.replace("iter_", "iter "), load_image(p)) for p in files]]
                return _image_grid(cells, rep.panels / f"progress_{n}.png", f"{n} preview over training")
            rep.panel(f"progress_{name}", strip)
    rep.sections.append("train-sr")

    rep.section("Inference throughput")
    if not ctx.completed("infer-sr"):
        rep.missing("infer-sr")
        return
    for name, info in sorted(ctx.details("infer-sr").get("throughput", {}).items()):
        rep.lines.append(f"{name}: {info['images']} images, {info['images_per_second']:.2f} images/s")


def _montages(rep: _Report) -> None:
    ctx = rep.ctx
    cfg = ctx.config
    if not (ctx.completed("scale") and ctx.completed("infer-sr")):
        return
    models = cfg.sr_models()
    for dataset in sorted(cfg.dataset.scenes):
        hr = read_chips(layout.chips_root(ctx, "test") / dataset, dataset)
        lr = dict(zip(*_indexed(layout.lr_root(ctx, "test") / dataset, dataset)))
        base = dict(zip(*_indexed(layout.baseline_root(ctx) / dataset, dataset)))
        sr = {m: dict(zip(*_indexed(layout.sr_root(ctx, m) / dataset, dataset))) for m in models}
        ids = hr.ids()[: cfg.report.montage_count]

        def montage(dataset=dataset, hr=hr, lr=lr, base=base, sr=sr, ids=ids):
            rows = []
            for chip_id, chip in zip(ids, hr.chips):
                row = [("raw LR", lr.get(chip_id)), (BASELINE_MODEL, base.get(chip_id))]
                row += [(f"SR {m}", sr[m].get(chip_id)) for m in models]
                row.append(("HR", chip))
                rows.append(row)
            return _image_grid(rows, rep.panels / f"montage_{dataset}.png", f"{dataset}: raw vs scaled vs SR")

        def differences(dataset=dataset, hr=hr, base=base, sr=sr):
            if not len(hr):
                return None
            first = hr.ids()[0]
            labels = ["HR", BASELINE_MODEL] + [f"SR {m}" for m in models]
            images = [hr.chips[0], base.get(first)] + [sr[m].get(first) for m in models]
            pairs = [(label, im) for label, im in zip(labels, images) if im is not None]
            if len(pairs) < 2:
                return None
            grid = abs_difference_matrix([im for _, im in pairs])
            cells = [
                [(f"|{pairs[i][0]} - {pairs[j][0]}|", grid[i][j]) for j in range(len(pairs))]
                for i in range(len(pairs))
            ]
            return _image_grid(cells, rep.panels / f"difference_{dataset}.png", f"{dataset}: absolute differences")

        rep.panel(f"montage_{dataset}", montage)
        rep.panel(f"difference_{dataset}", differences)


def _indexed(directory: Path, label: str):
    chips = read_chips(directory, label) if directory.exists() else None
    if chips is None:
        return [], []
    return chips.ids(), chips.chips


def _histograms(rep: _Report) -> None:
    ctx = rep.ctx
    if not ctx.completed("tile"):
        return
    rep.section("Land-use colour statistics (mean 8-bit value R/G/B)")
    for dataset in sorted(ctx.config.dataset.scenes):
        chips = []
        for split_name in ("train", "test"):
            chips += read_chips(layout.chips_root(ctx, split_name) / dataset, dataset).chips
        if not chips:
            continue
        hist = class_histogram(chips)
        rep.lines.append(f"{dataset}: " + " / ".join(f"{m:.1f}" for m in hist.means))
        rep.panel(
            f"histogram_{dataset}",
            lambda d=dataset, h=hist: histogram_panel(h, rep.panels / f"histogram_{d}.png", f"{d} RGB histogram"),
        )


def _classifier(rep: _Report) -> None:
    ctx = rep.ctx
    rep.section("Ship classifier")
    if not ctx.completed("eval-classifier"):
        rep.missing("eval-classifier")
        return
    results: Dict[str, EvalResult] = EVAL_RESULTS.validate_json(
        layout.results_path(ctx, "classifier.json").read_text(encoding="utf-8")
    )
    rows = []
    for source, r in results.items():
        (tn, fp), (fn, tp) = r.confusion[0][:2], r.confusion[1][:2]
        rows.append({
            "source": source, "accuracy": r.accuracy, "count": r.count,
            "tn": tn, "fp": fp, "fn": fn, "tp": tp, "misclassified": len(r.misclassified),
        })
        rep.lines.append(f"{source}: accuracy {r.accuracy:.4f} ({r.count} chips, {len(r.misclassified)} misclassified)")
        if r.misclassified:
            rep.panel(f"failures_{source}", lambda s=source, ids=r.misclassified: _failure_panel(rep, s, ids))
    rep.csv("classifier.csv", rows, CLASSIFIER_FIELDS)
    rep.sections.append("eval-classifier")


def _failure_panel(rep: _Report, source: str, ids: Sequence[str]) -> Optional[Path]:
    from app.workflows.classify import SHIP_CLASSES

    root = rep.ctx.config.classifier.data
    cells = []
    for label in SHIP_CLASSES:
        chips = read_chips(Path(root) / label, label)
        by_id = dict(zip(chips.ids(), chips.chips))
        cells += [(f"{chip_id} ({label})", by_id[chip_id]) for chip_id in ids if chip_id in by_id]
    cells = cells[:FAILURE_LIMIT]
    if not cells:
        return None
    slug = layout.source_slug(source)
    return _image_grid([cells], rep.panels / f"failures_{slug}.png", f"{source}: misclassified chips")


def _detection(rep: _Report) -> None:
    ctx = rep.ctx
    rep.section("Detection average precision")
    if not ctx.completed("eval-detection"):
        rep.missing("eval-detection")
        return
    report = DetectionReport.model_validate_json(
        layout.results_path(ctx, "detection.json").read_text(encoding="utf-8")
    )
    rows = report.rows() + [{"class": "mAP", "ap": report.mean_ap}]
    rep.csv("detection.csv", rows, DETECTION_FIELDS)
    for r in report.per_class:
        rep.lines.append(f"{r.class_name}: AP {r.ap:.4f} ({r.tp} TP, {r.fp} FP, {r.gt_count} GT)")
    rep.lines.append(
        f"mAP {report.mean_ap:.4f} at IoU >= {report.iou_threshold:g}, {report.interpolation} interpolation"
    )
    rep.sections.append("eval-detection")


def report(ctx: RunContext) -> StageResult:
    """Assemble CSV tables, a text summary and PNG panels from completed stages."""
    rep = _Report(ctx)
    _quality(rep)
    _sweeps(rep)
    _training(rep)
    _classifier(rep)
    _detection(rep)
    _histograms(rep)
    _montages(rep)

    header = ["SR workbench report", "==================="]
    footer = [
        "",
        "--",
        f"config {ctx.config_hash}",
        f"sr-workbench {__version__}, numpy {np.__version__}, matplotlib {matplotlib.__version__}, "
        f"python {platform.python_version()}",
    ]
    summary = write_text_atomic("\n".join(header + rep.lines + footer) + "\n", rep.out / "summary.txt")
    rep.artifacts.append(summary)
    logging.info(f"Report written to {rep.out} ({len(rep.artifacts)} files)")
    return StageResult(rep.artifacts, {"sections": rep.sections})
