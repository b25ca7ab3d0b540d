"""Full-reference image quality metrics and diagnostic image tables."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.signal import convolve2d

from app.core.errors import ShapeError
from app.core.images import ImageTensor, to_uint8
from app.core.resample import KEYS, KernelSpec, degrade_4x

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

SrModel = Callable[[ImageTensor], ImageTensor]


def _check_same_shape(a: ImageTensor, b: ImageTensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"Image shapes differ: {a.shape} vs {b.shape}")


def mse(a: ImageTensor, b: ImageTensor) -> float:
    _check_same_shape(a, b)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    return float(np.mean(diff * diff))


def psnr(a: ImageTensor, b: ImageTensor, peak: Optional[float] = None) -> float:
    """Peak signal-to-noise ratio in dB over all channels and pixels.

    Args:
        a: Reference image
        b: Test image of the same shape
        peak: Peak signal value; defaults to the dynamic range of ``a``'s convention

    Returns:
        10 * log10(peak^2 / MSE), ``inf`` for identical images
    """
    peak = a.dynamic_range if peak is None else peak
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    error = mse(a, b)
    if error == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / error)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian weights."""
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, window: np.ndarray, c1: float, c2: float) -> float:
    def filt(v):
        return convolve2d(v, window, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x * mu_x
    var_y = filt(y * y) - mu_y * mu_y
    cov = filt(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def ssim(a: ImageTensor, b: ImageTensor, dynamic_range: Optional[float] = None) -> float:
    """Mean structural similarity over 11x11 Gaussian windows, averaged over channels.

    Windows are placed only where they fit entirely inside the image. ``L`` is
    the dynamic range of the image convention unless given.

    Raises:
        ShapeError: If shapes differ or the image is smaller than the window
    """
    _check_same_shape(a, b)
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.width}x{a.height}")
    L = a.dynamic_range if dynamic_range is None else dynamic_range
    c1, c2 = (SSIM_K1 * L) ** 2, (SSIM_K2 * L) ** 2
    window = gaussian_window()
    x, y = a.data.astype(np.float64), b.data.astype(np.float64)
    return float(np.mean([_ssim_channel(x[c], y[c], window, c1, c2) for c in range(a.channels)]))


class ImageScore(BaseModel):
    """Scores of one image against its reference."""

    model_config = ConfigDict(ser_json_inf_nan="strings")

    id: str
    psnr: float
    ssim: float
    mse: float


class MetricsReport(BaseModel):
    """Per-image scores plus mean and population standard deviation."""

    model_config = ConfigDict(ser_json_inf_nan="strings")

    per_image: List[ImageScore] = Field(default_factory=list)
    skipped: int = 0
    psnr_mean: float = math.nan
    psnr_std: float = math.nan
    ssim_mean: float = math.nan
    ssim_std: float = math.nan
    mse_mean: float = math.nan

    @property
    def count(self) -> int:
        return len(self.per_image)

    @classmethod
    def from_scores(cls, scores: Sequence[ImageScore], skipped: int = 0) -> "MetricsReport":
        report = cls(per_image=list(scores), skipped=skipped)
        if not scores:
            return report
        p = np.array([s.psnr for s in scores])
        s = np.array([s.ssim for s in scores])
        m = np.array([s.mse for s in scores])
        report.psnr_mean = float(np.mean(p))
        if np.isinf(p).all():
            report.psnr_std = 0.0
        elif np.isfinite(p).all():
            report.psnr_std = float(np.std(p))
        report.ssim_mean = float(np.mean(s))
        report.ssim_std = float(np.std(s))
        report.mse_mean = float(np.mean(m))
        return report


def score(reference: ImageTensor, candidate: ImageTensor, image_id: str = "", peak: Optional[float] = None) -> ImageScore:
    return ImageScore(
        id=image_id,
        psnr=psnr(reference, candidate, peak),
        ssim=ssim(reference, candidate, peak),
        mse=mse(reference, candidate),
    )


def compare(
    references: Sequence[ImageTensor],
    candidates: Sequence[ImageTensor],
    ids: Optional[Sequence[str]] = None,
    peak: Optional[float] = None,
) -> MetricsReport:
    """Score candidate images against references pairwise; failures become skips."""
    ids = list(ids) if ids is not None else [str(i) for i in range(len(references))]
    scores, skipped = [], 0
    for ref, cand, image_id in zip(references, candidates, ids):
        try:
            scores.append(score(ref, cand, image_id, peak))
        except Exception as e:
            skipped += 1
            logger.warning(f"Skipping {image_id}: {e}")
    return MetricsReport.from_scores(scores, skipped)


def abs_difference_matrix(images: Sequence[ImageTensor]) -> List[List[ImageTensor]]:
    """n x n grid with cell (i, j) = |image_i - image_j| per pixel."""
    if len(images) < 2:
        raise ValueError("abs_difference_matrix needs at least two images")
    for other in images[1:]:
        _check_same_shape(images[0], other)
    grid = []
    for i, a in enumerate(images):
        row = []
        for j, b in enumerate(images):
            row.append(a.derive(np.abs(a.data - b.data), pair=(i, j)))
        grid.append(row)
    return grid


class RgbHistogram(BaseModel):
    """Per-channel 256-bin counts of 8-bit values."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    counts: np.ndarray
    means: Tuple[float, ...]

    @property
    def pixel_count(self) -> int:
        return int(self.counts[0].sum())


def rgb_histogram(image: ImageTensor) -> RgbHistogram:
    """Exact bin counts plus the mean 8-bit value of each channel."""
    pixels = to_uint8(image)
    counts = np.stack([
        np.bincount(pixels[:, :, c].ravel(), minlength=256) for c in range(pixels.shape[2])
    ])
    means = tuple(float(pixels[:, :, c].mean()) for c in range(pixels.shape[2]))
    return RgbHistogram(counts=counts, means=means)


class SweepCell(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="strings")

    model: str
    dataset: str
    report: MetricsReport


class SweepTable(BaseModel):
    """Model x dataset grid of metrics reports."""

    model_config = ConfigDict(ser_json_inf_nan="strings")

    kernel: str
    cells: List[SweepCell] = Field(default_factory=list)

    def cell(self, model: str, dataset: str) -> MetricsReport:
        for c in self.cells:
            if c.model == model and c.dataset == dataset:
                return c.report
        raise KeyError((model, dataset))

    def rows(self) -> List[Dict[str, object]]:
        return [
            {
                "model": c.model,
                "dataset": c.dataset,
                "kernel": self.kernel,
                "count": c.report.count,
                "skipped": c.report.skipped,
                "psnr_mean": c.report.psnr_mean,
                "psnr_std": c.report.psnr_std,
                "ssim_mean": c.report.ssim_mean,
                "ssim_std": c.report.ssim_std,
            }
            for c in self.cells
        ]

    def format_table(self) -> str:
        models = list(dict.fromkeys(c.model for c in self.cells))
        datasets = list(dict.fromkeys(c.dataset for c in self.cells))
        width = max([len(m) for m in models] + [5])
        lines = [f"PSNR (dB) / SSIM, degradation {self.kernel}"]
        lines.append(" " * width + "".join(f" | {d:>17}" for d in datasets))
        for m in models:
            row = f"{m:<{width}}"
            for d in datasets:
                r = self.cell(m, d)
                row += f" | {r.psnr_mean:8.3f} / {r.ssim_mean:6.4f}"
            lines.append(row)
        return "\n".join(lines)


def _sweep_one(model: SrModel, chip: ImageTensor, kernel: KernelSpec, chip_id: str) -> ImageScore:
    lr = degrade_4x(chip, kernel)
    sr = model(lr)
    return score(chip, sr, chip_id)


def sweep(
    models: Mapping[str, SrModel],
    datasets: Mapping[str, Sequence[ImageTensor]],
    kernel: KernelSpec = KEYS,
    jobs: int = 1,
    ids: Optional[Mapping[str, Sequence[str]]] = None,
) -> SweepTable:
    """Degrade, super-resolve and score every chip for every model.

    Per-chip failures are logged and counted as skips; results are reduced in
    chip order regardless of ``jobs``.

    Args:
        models: Name -> callable mapping an LR image to a 4x image
        datasets: Name -> HR chips
        kernel: Degradation kernel
        jobs: Worker threads per cell
        ids: Optional chip ids per dataset

    Returns:
        SweepTable with one cell per (model, dataset)
    """
    table = SweepTable(kernel=kernel.label())
    for model_name, model in models.items():
        for dataset_name, chips in datasets.items():
            chip_ids = list(ids[dataset_name]) if ids and dataset_name in ids else [
                str(i) for i in range(len(chips))
            ]

            def run(index: int):
                try:
                    return _sweep_one(model, chips[index], kernel, chip_ids[index])
                except Exception as e:
                    logger.warning(f"Sweep {model_name}/{dataset_name} chip {chip_ids[index]} skipped: {e}")
                    return None

            if jobs > 1:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    results = list(pool.map(run, range(len(chips))))
            else:
                results = [run(i) for i in range(len(chips))]

            scores = [r for r in results if r is not None]
            report = MetricsReport.from_scores(scores, skipped=len(results) - len(scores))
            table.cells.append(SweepCell(model=model_name, dataset=dataset_name, report=report))
            logger.info(
                f"Sweep {model_name} x {dataset_name}: PSNR {report.psnr_mean:.3f} "
                f"SSIM {report.ssim_mean:.4f} ({report.count} chips, {report.skipped} skipped)"
            )
    return table
