"""Detection-quality evaluation: IoU matching, precision/recall and average precision.

Detections come from an external detector as CSV rows
``image_id,xmin,ymin,xmax,ymax,confidence,class``; ground truth comes from VOC
annotation files.
"""

import csv
import io
import logging
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, computed_field

from app.core.errors import DetectionFormatError, NoGroundTruthError
from app.core.models import AnnotationSet, Box, Detection

logger = logging.getLogger(__name__)

Interpolation = Literal["all_point", "voc11"]

CSV_FIELDS = ("image_id", "xmin", "ymin", "xmax", "ymax", "confidence", "class")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    w = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    h = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


class MatchedDetection(BaseModel):
    detection: Detection
    true_positive: bool
    gt_index: Optional[int] = None
    iou: float = 0.0


class MatchResult(BaseModel):
    matches: List[MatchedDetection] = Field(default_factory=list)
    gt_count: int = 0

    @property
    def tp(self) -> int:
        return sum(m.true_positive for m in self.matches)

    @property
    def fp(self) -> int:
        return len(self.matches) - self.tp


def match(
    detections: Sequence[Detection],
    ground_truth: Mapping[str, AnnotationSet],
    iou_threshold: float = 0.5,
    class_name: Optional[str] = None,
) -> MatchResult:
    """Greedily label detections as true or false positives.

    Detections are visited by descending confidence (ties broken by image id,
    then box). Each takes the unmatched ground-truth box of its image with the
    highest IoU, provided IoU >= ``iou_threshold``; otherwise it is a false
    positive. A second detection on an already matched object is therefore a
    false positive.

    Args:
        detections: Detector output
        ground_truth: Image id -> annotations
        iou_threshold: Minimum IoU for a match, in (0, 1]
        class_name: Restrict both sides to one class

    Returns:
        MatchResult in visiting order, with the ground-truth count
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")

    def wanted(name: str) -> bool:
        return class_name is None or name == class_name

    boxes: Dict[str, List[Box]] = {
        image_id: [a.box for a in ann.objects if wanted(a.name)]
        for image_id, ann in ground_truth.items()
    }
    taken: Dict[str, set] = {image_id: set() for image_id in boxes}
    result = MatchResult(gt_count=sum(len(b) for b in boxes.values()))

    for det in sorted((d for d in detections if wanted(d.class_name)), key=lambda d: d.sort_key):
        best, best_iou = None, 0.0
        for index, gt in enumerate(boxes.get(det.image_id, [])):
            if index in taken[det.image_id]:
                continue
            overlap = iou(det.box, gt)
            if overlap >= iou_threshold and overlap > best_iou:
                best, best_iou = index, overlap
        if best is not None:
            taken[det.image_id].add(best)
        result.matches.append(
            MatchedDetection(detection=det, true_positive=best is not None, gt_index=best, iou=best_iou)
        )
    return result


class ApResult(BaseModel):
    """Average precision of one class plus its precision/recall staircase."""

    class_name: str = ""
    ap: float
    precision: List[float] = Field(default_factory=list)
    recall: List[float] = Field(default_factory=list)
    tp: int = 0
    fp: int = 0
    gt_count: int = 0
    interpolation: Interpolation = "all_point"

    @property
    def missed(self) -> int:
        return self.gt_count - self.tp


def average_precision(
    matched: Union[MatchResult, Sequence[bool]],
    gt_count: Optional[int] = None,
    interpolation: Interpolation = "all_point",
    class_name: str = "",
) -> ApResult:
    """Area under the interpolated precision/recall curve.

    ``all_point`` integrates the monotone precision envelope over every recall
    step; ``voc11`` averages the envelope sampled at recall 0, 0.1, ..., 1.

    Args:
        matched: MatchResult, or TP flags already in descending-confidence order
        gt_count: Ground-truth count (taken from the MatchResult when omitted)
        interpolation: ``all_point`` or ``voc11``
        class_name: Label carried into the result

    Raises:
        NoGroundTruthError: If there are no ground-truth boxes
    """
    if isinstance(matched, MatchResult):
        flags = [m.true_positive for m in matched.matches]
        gt_count = matched.gt_count if gt_count is None else gt_count
    else:
        flags = [bool(f) for f in matched]
    if not gt_count or gt_count < 1:
        raise NoGroundTruthError(f"No ground truth for class {class_name!r}; AP is undefined")

    tp = np.cumsum(np.array(flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.array(flags, dtype=np.float64))
    recall = tp / gt_count
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)

    if interpolation == "voc11":
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            above = precision[recall >= t - 1e-12]
            ap += (above.max() if above.size else 0.0) / 11.0
    else:
        mrec = np.concatenate([[0.0], recall, [1.0]])
        mpre = np.concatenate([[0.0], precision, [0.0]])
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        steps = np.where(mrec[1:] != mrec[:-1])[0]
        ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))

    n_tp = int(tp[-1]) if flags else 0
    return ApResult(
        class_name=class_name,
        ap=float(ap),
        precision=precision.tolist(),
        recall=recall.tolist(),
        tp=n_tp,
        fp=len(flags) - n_tp,
        gt_count=int(gt_count),
        interpolation=interpolation,
    )


class DetectionReport(BaseModel):
    per_class: List[ApResult] = Field(default_factory=list)
    iou_threshold: float = 0.5
    interpolation: Interpolation = "all_point"

    @computed_field
    @property
    def mean_ap(self) -> float:
        return float(np.mean([r.ap for r in self.per_class])) if self.per_class else 0.0

    def rows(self) -> List[Dict[str, object]]:
        return [
            {"class": r.class_name, "ap": r.ap, "tp": r.tp, "fp": r.fp, "gt": r.gt_count}
            for r in self.per_class
        ]


def evaluate_detections(
    detections: Sequence[Detection],
    ground_truth: Mapping[str, AnnotationSet],
    iou_threshold: float = 0.5,
    interpolation: Interpolation = "all_point",
) -> DetectionReport:
    """Per-class AP and their mean over every class present in the ground truth."""
    classes = sorted({a.name for ann in ground_truth.values() for a in ann.objects})
    stray = sorted({d.class_name for d in detections} - set(classes))
    if stray:
        logger.warning(f"Ignoring detections of classes without ground truth: {stray}")
    report = DetectionReport(iou_threshold=iou_threshold, interpolation=interpolation)
    for name in classes:
        matched = match(detections, ground_truth, iou_threshold, class_name=name)
        result = average_precision(matched, interpolation=interpolation, class_name=name)
        report.per_class.append(result)
        logger.info(f"AP[{name}] = {result.ap:.4f} ({result.tp} TP, {result.fp} FP, {result.gt_count} GT)")
    return report


def _number(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def parse_detections(text: str) -> List[Detection]:
    """Strictly parse detections CSV text; an optional header row is allowed.

    Raises:
        DetectionFormatError: Carrying the 1-based row number of the bad row
    """
    detections = []
    for row_number, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        cells = [cell.strip() for cell in row]
        if row_number == 1 and tuple(cells) == CSV_FIELDS:
            continue
        if len(cells) != len(CSV_FIELDS):
            raise DetectionFormatError(row_number, f"expected {len(CSV_FIELDS)} fields, got {len(cells)}")
        image_id, *numbers, class_name = cells
        if not image_id or not class_name:
            raise DetectionFormatError(row_number, "empty image id or class")
        try:
            xmin, ymin, xmax, ymax, confidence = (float(v) for v in numbers)
        except ValueError as e:
            raise DetectionFormatError(row_number, f"non-numeric field ({e})") from e
        if not 0.0 <= confidence <= 1.0:
            raise DetectionFormatError(row_number, f"confidence {confidence} outside [0, 1]")
        try:
            box = Box(xmin=xmin, ymin=ymin, xmax=xmax, ymax=ymax)
        except ValidationError as e:
            raise DetectionFormatError(row_number, f"invalid box ({xmin}, {ymin}, {xmax}, {ymax})") from e
        detections.append(Detection(image_id=image_id, box=box, confidence=confidence, class_name=class_name))
    return detections


def load_detections(path: Union[str, Path]) -> List[Detection]:
    return parse_detections(Path(path).read_text(encoding="utf-8"))


def emit_detections(detections: Sequence[Detection]) -> str:
    """Serialize detections as header-less CSV that parses back identically."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    for d in detections:
        writer.writerow([d.image_id, *(_number(v) for v in d.box.as_tuple()), repr(float(d.confidence)), d.class_name])
    return buffer.getvalue()


def write_detections(detections: Sequence[Detection], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(emit_detections(detections), encoding="utf-8")
    return path
