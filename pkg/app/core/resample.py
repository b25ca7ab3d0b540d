"""Separable resampling kernels and image resizing.

Coordinates follow the pixel-centre convention: output pixel ``d`` samples the
source at ``(d + 0.5) * scale - 0.5`` with ``scale = in_size / out_size``. When
shrinking, the kernel is stretched by ``scale`` so it also low-pass filters.
Taps falling outside the image are dropped and the remaining weights
renormalized to sum to one.
"""

import logging
import math
from functools import lru_cache
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from app.core.errors import ResampleError
from app.core.images import ImageTensor

logger = logging.getLogger(__name__)

KernelFamily = Literal["nearest", "bilinear", "keys_bicubic", "mitchell_netravali", "lanczos"]


class KernelSpec(BaseModel):
    """A member of the resampling kernel family."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    family: KernelFamily = "keys_bicubic"
    a: float = -0.5
    b: float = 1.0 / 3.0
    c: float = 1.0 / 3.0
    lobes: int = 3

    @model_validator(mode="after")
    def _check_lobes(self) -> "KernelSpec":
        if self.family == "lanczos" and self.lobes not in (2, 3, 4):
            raise ValueError("lanczos lobes must be 2, 3 or 4")
        return self

    @property
    def support(self) -> float:
        return {
            "nearest": 0.5,
            "bilinear": 1.0,
            "keys_bicubic": 2.0,
            "mitchell_netravali": 2.0,
            "lanczos": float(self.lobes),
        }[self.family]

    def label(self) -> str:
        if self.family == "keys_bicubic":
            return f"keys(a={self.a:g})"
        if self.family == "mitchell_netravali":
            return f"mitchell(B={self.b:.4g},C={self.c:.4g})"
        if self.family == "lanczos":
            return f"lanczos({self.lobes})"
        return self.family


KEYS = KernelSpec(family="keys_bicubic")
MITCHELL = KernelSpec(family="mitchell_netravali")
NEAREST = KernelSpec(family="nearest")
BILINEAR = KernelSpec(family="bilinear")


def kernel_weight(spec: KernelSpec, x: float) -> float:
    """Evaluate the kernel at offset ``x``; zero outside its support."""
    ax = abs(x)
    if ax >= spec.support:
        return 0.0

    if spec.family == "nearest":
        return 1.0

    if spec.family == "bilinear":
        return 1.0 - ax

    if spec.family == "keys_bicubic":
        a = spec.a
        if ax < 1.0:
            return (a + 2.0) * ax ** 3 - (a + 3.0) * ax ** 2 + 1.0
        return a * ax ** 3 - 5.0 * a * ax ** 2 + 8.0 * a * ax - 4.0 * a

    if spec.family == "mitchell_netravali":
        b, c = spec.b, spec.c
        if ax < 1.0:
            return (
                (12.0 - 9.0 * b - 6.0 * c) * ax ** 3
                + (-18.0 + 12.0 * b + 6.0 * c) * ax ** 2
                + (6.0 - 2.0 * b)
            ) / 6.0
        return (
            (-b - 6.0 * c) * ax ** 3
            + (6.0 * b + 30.0 * c) * ax ** 2
            + (-12.0 * b - 48.0 * c) * ax
            + (8.0 * b + 24.0 * c)
        ) / 6.0

    # lanczos
    if ax == 0.0:
        return 1.0
    n = spec.lobes
    px = math.pi * ax
    return n * math.sin(px) * math.sin(px / n) / (px * px)


@lru_cache(maxsize=128)
def _weights_cached(spec: KernelSpec, in_size: int, out_size: int) -> np.ndarray:
    scale = in_size / out_size
    stretch = max(scale, 1.0)
    reach = spec.support * stretch
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    for d in range(out_size):
        center = (d + 0.5) * scale - 0.5
        lo = max(int(math.floor(center - reach)), 0)
        hi = min(int(math.ceil(center + reach)), in_size - 1)
        for i in range(lo, hi + 1):
            matrix[d, i] = kernel_weight(spec, (i - center) / stretch)
        total = matrix[d].sum()
        if total == 0.0:
            nearest = min(max(int(math.floor(center + 0.5)), 0), in_size - 1)
            matrix[d, nearest] = 1.0
        else:
            matrix[d] /= total
    matrix.setflags(write=False)
    return matrix


def weight_matrix(spec: KernelSpec, in_size: int, out_size: int) -> np.ndarray:
    """Row-normalized (out_size, in_size) filter matrix for one axis."""
    return _weights_cached(spec, in_size, out_size)


def resize(
    image: ImageTensor,
    out_w: int,
    out_h: int,
    spec: KernelSpec = KEYS,
    clip: Optional[bool] = False,
) -> ImageTensor:
    """Resize with a separable two-pass filter (horizontal, then vertical).

    Args:
        image: Planar image (C, H, W)
        out_w: Output width
        out_h: Output height
        spec: Kernel to use
        clip: Clip the result to the image convention's value range

    Returns:
        Resized image in the same value convention

    Raises:
        ResampleError: If the image is empty or a target size is < 1
    """
    if out_w < 1 or out_h < 1:
        raise ResampleError(f"Target size must be at least 1x1, got {out_w}x{out_h}")
    if image.data.size == 0 or image.width == 0 or image.height == 0:
        raise ResampleError("Cannot resize an empty image")

    data = image.data.astype(np.float64)
    wx = weight_matrix(spec, image.width, out_w)
    wy = weight_matrix(spec, image.height, out_h)
    horizontal = data @ wx.T
    out = np.einsum("oh,chw->cow", wy, horizontal)
    if clip:
        lo, hi = image.value_range
        out = np.clip(out, lo, hi)
    return image.derive(out.astype(image.data.dtype))


def degrade_4x(hr: ImageTensor, spec: KernelSpec = KEYS) -> ImageTensor:
    """Down-sample by four in each dimension, recording the kernel used.

    Raises:
        ResampleError: If width or height is not divisible by four
    """
    if hr.width % 4 or hr.height % 4:
        raise ResampleError(f"Image {hr.width}x{hr.height} is not divisible by 4")
    lr = resize(hr, hr.width // 4, hr.height // 4, spec)
    lr.provenance["degradation"] = spec.label()
    return lr


def upscale_4x(lr: ImageTensor, spec: KernelSpec = MITCHELL, clip: bool = True) -> ImageTensor:
    """Scaled baseline: enlarge by four with ``spec`` (Mitchell-Netravali by default)."""
    sr = resize(lr, lr.width * 4, lr.height * 4, spec, clip=clip)
    sr.provenance["upscale"] = spec.label()
    return sr
