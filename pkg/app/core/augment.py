"""Seeded geometric augmentation: rotation, shifts and horizontal flip."""

import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.ndimage import affine_transform

from app.core.images import ImageTensor


class AugmentParams(BaseModel):
    """Ranges the random transform is drawn from."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    rotation_range: float = Field(default=10.0, ge=0)
    width_shift: float = Field(default=0.1, ge=0, lt=1)
    height_shift: float = Field(default=0.1, ge=0, lt=1)
    horizontal_flip: bool = True


def apply_transform(
    image: ImageTensor,
    angle: float = 0.0,
    shift_x: float = 0.0,
    shift_y: float = 0.0,
    flip: bool = False,
) -> ImageTensor:
    """Flip, rotate about the centre, then shift.

    Args:
        image: Planar image
        angle: Rotation in degrees
        shift_x: Horizontal shift as a fraction of the width (positive moves content right)
        shift_y: Vertical shift as a fraction of the height (positive moves content down)
        flip: Mirror left-right before rotating

    Returns:
        Transformed image; bilinear interpolation, borders filled with the nearest edge value
    """
    if angle == 0.0 and shift_x == 0.0 and shift_y == 0.0:
        data = image.data[:, :, ::-1] if flip else image.data
        return image.derive(np.ascontiguousarray(data))

    h, w = image.height, image.width
    theta = math.radians(angle)
    cos, sin = math.cos(theta), math.sin(theta)
    # output (row, col) -> input (row, col)
    rot_inv = np.array([[cos, sin], [-sin, cos]])
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([shift_y * h, shift_x * w])
    mirror = np.diag([1.0, -1.0]) if flip else np.eye(2)
    mirror_offset = np.array([0.0, w - 1.0]) if flip else np.zeros(2)

    matrix = mirror @ rot_inv
    offset = mirror @ (center - rot_inv @ (shift + center)) + mirror_offset

    out = np.empty_like(image.data)
    for ch in range(image.channels):
        out[ch] = affine_transform(
            image.data[ch], matrix, offset=offset, order=1, mode="nearest"
        )
    return image.derive(out)


def augment(image: ImageTensor, seed: int, params: AugmentParams = AugmentParams()) -> ImageTensor:
    """Random rotation, width/height shift and flip drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    angle = rng.uniform(-params.rotation_range, params.rotation_range)
    shift_x = rng.uniform(-params.width_shift, params.width_shift)
    shift_y = rng.uniform(-params.height_shift, params.height_shift)
    flip = bool(params.horizontal_flip and rng.random() < 0.5)
    return apply_transform(image, angle, shift_x, shift_y, flip)
