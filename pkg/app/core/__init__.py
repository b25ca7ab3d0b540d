"""Numerics, image handling and model code of the super-resolution workbench."""

from .config import settings
from .classifier import ClassifierSpec, build as build_classifier, evaluate as evaluate_classifier
from .detection import DetectionReport, average_precision, evaluate_detections, iou, match
from .graph import ModelGraph, backward, forward, grad_check
from .images import ImageTensor, NormalizationSpec, denormalize, load_image, normalize, save_image
from .metrics import SweepTable, compare, psnr, ssim, sweep
from .models import Annotation, AnnotationSet, Box, Detection
from .resample import KEYS, MITCHELL, KernelSpec, degrade_4x, upscale_4x
from .srgan import SrganConfig, super_resolve, train as train_srgan

__all__ = [
    "settings",
    "ClassifierSpec",
    "build_classifier",
    "evaluate_classifier",
    "DetectionReport",
    "average_precision",
    "evaluate_detections",
    "iou",
    "match",
    "ModelGraph",
    "backward",
    "forward",
    "grad_check",
    "ImageTensor",
    "NormalizationSpec",
    "denormalize",
    "load_image",
    "normalize",
    "save_image",
    "SweepTable",
    "compare",
    "psnr",
    "ssim",
    "sweep",
    "Annotation",
    "AnnotationSet",
    "Box",
    "Detection",
    "KEYS",
    "MITCHELL",
    "KernelSpec",
    "degrade_4x",
    "upscale_4x",
    "SrganConfig",
    "super_resolve",
    "train_srgan",
]
