"""Planar float images, value conventions and PNG I/O."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Literal, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict

from app.core.errors import ImageDecodeError, ShapeError, UnsupportedImageError

logger = logging.getLogger(__name__)

Convention = Literal["byte", "unit", "signed_unit", "mean_centered"]

VALUE_RANGES: Dict[str, Tuple[float, float]] = {
    "byte": (0.0, 255.0),
    "unit": (0.0, 1.0),
    "signed_unit": (-1.0, 1.0),
    "mean_centered": (-2.0, 2.0),
}


@dataclass
class ImageTensor:
    """Image stored as a (channels, height, width) float array.

    ``convention`` names the value range: ``byte`` [0, 255], ``unit`` [0, 1],
    ``signed_unit`` [-1, 1]. ``provenance`` carries free-form metadata such as
    the source scene, tile origin or the kernel used to produce the image.
    """

    data: np.ndarray
    convention: Convention = "byte"
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ShapeError(f"ImageTensor expects (C, H, W), got shape {self.data.shape}")
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def value_range(self) -> Tuple[float, float]:
        return VALUE_RANGES[self.convention]

    @property
    def dynamic_range(self) -> float:
        lo, hi = self.value_range
        return hi - lo

    def derive(self, data: np.ndarray, convention: Convention | None = None, **provenance) -> "ImageTensor":
        """New image with different pixels, inheriting metadata."""
        meta = dict(self.provenance)
        meta.update(provenance)
        return ImageTensor(data, convention or self.convention, meta)

    def copy(self) -> "ImageTensor":
        return ImageTensor(self.data.copy(), self.convention, dict(self.provenance))


class NormalizationSpec(BaseModel):
    """Mapping between 8-bit values and model input range.

    ``signed_unit``: x / 127.5 - 1; ``unit``: x / 255; ``mean_centered``:
    signed-unit scaling minus the per-image channel means (kept in provenance
    so the mapping can be inverted).
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: Literal["signed_unit", "unit", "mean_centered"] = "signed_unit"


def normalize(image: ImageTensor, spec: NormalizationSpec) -> ImageTensor:
    """Encode an 8-bit-range image into the range named by ``spec``."""
    x = image.data.astype(np.float64)
    if spec.mode == "unit":
        return image.derive(x / 255.0, "unit")
    scaled = x / 127.5 - 1.0
    if spec.mode == "signed_unit":
        return image.derive(scaled, "signed_unit")
    means = scaled.mean(axis=(1, 2))
    return image.derive(
        scaled - means[:, None, None], "mean_centered", channel_means=means.tolist()
    )


def denormalize(image: ImageTensor) -> ImageTensor:
    """Decode to 8-bit range: clip to [0, 255] and round half up."""
    x = image.data.astype(np.float64)
    if image.convention == "unit":
        x = x * 255.0
    elif image.convention == "signed_unit":
        x = (x + 1.0) * 127.5
    elif image.convention == "mean_centered":
        means = np.asarray(image.provenance.get("channel_means", [0.0] * image.channels))
        x = (x + means[:, None, None] + 1.0) * 127.5
    x = np.floor(np.clip(x, 0.0, 255.0) + 0.5)
    meta = {k: v for k, v in image.provenance.items() if k != "channel_means"}
    return ImageTensor(x, "byte", meta)


def to_uint8(image: ImageTensor) -> np.ndarray:
    """(H, W, C) uint8 array of the decoded image."""
    decoded = image if image.convention == "byte" else denormalize(image)
    data = np.floor(np.clip(decoded.data, 0.0, 255.0) + 0.5)
    return data.astype(np.uint8).transpose(1, 2, 0)


def from_uint8(array: np.ndarray, **provenance) -> ImageTensor:
    """ImageTensor (byte convention) from an (H, W, C) uint8 array."""
    return ImageTensor(array.transpose(2, 0, 1).astype(np.float64), "byte", dict(provenance))


def load_image(path: Union[str, Path]) -> ImageTensor:
    """Read an 8-bit RGB image file.

    Greyscale images are promoted to RGB with a warning.

    Args:
        path: Image file path

    Returns:
        Byte-convention ImageTensor of shape (3, H, W)

    Raises:
        ImageDecodeError: If the file is missing, truncated or not an image
        UnsupportedImageError: For bit depths other than 8 or non-RGB layouts
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "F", "1"):
                raise UnsupportedImageError(f"{path}: unsupported bit depth (mode {mode})")
            if mode in ("L", "P"):
                logger.warning(f"Promoting {mode} image to RGB: {path}")
                img = img.convert("RGB")
            elif mode != "RGB":
                raise UnsupportedImageError(f"{path}: expected RGB channels, got mode {mode}")
            array = np.asarray(img, dtype=np.uint8)
    except UnsupportedImageError:
        raise
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as e:
        raise ImageDecodeError(f"Cannot decode image {path}: {e}") from e
    return from_uint8(array, source=str(path))


def save_image(image: ImageTensor, path: Union[str, Path]) -> Path:
    """Write an image as an 8-bit RGB PNG (decoding its convention first)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = to_uint8(image)
    if array.shape[2] == 1:
        array = np.repeat(array, 3, axis=2)
    Image.fromarray(array).save(path, format="PNG")
    return path
