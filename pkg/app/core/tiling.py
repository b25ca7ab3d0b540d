"""Scene tiling, LR/HR pairing, dataset splits and chip directories.

Chip files follow ``<dataset>/<class>/<scene_id>_<x>_<y>.png`` where ``x`` and
``y`` are the pixel origin of the tile inside its scene.
"""

import hashlib
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import DatasetError
from app.core.images import ImageTensor, load_image, save_image
from app.core.resample import KEYS, KernelSpec, degrade_4x

logger = logging.getLogger(__name__)

CHIP_NAME = re.compile(r"^(?P<scene>.+)_(?P<x>\d+)_(?P<y>\d+)$")


@dataclass
class SceneChipSet:
    """Uniformly sized chips cut from one or more scenes."""

    chips: List[ImageTensor] = field(default_factory=list)
    label: Optional[str] = None
    status: Literal["ok", "empty"] = "ok"

    def __len__(self) -> int:
        return len(self.chips)

    def __iter__(self):
        return iter(self.chips)

    @property
    def chip_size(self) -> Optional[Tuple[int, int]]:
        if not self.chips:
            return None
        return self.chips[0].width, self.chips[0].height

    def ids(self) -> List[str]:
        return [chip_id(c) for c in self.chips]

    def extend(self, other: "SceneChipSet") -> None:
        if self.chips and other.chips and self.chip_size != other.chip_size:
            raise DatasetError(f"Cannot merge chip sizes {self.chip_size} and {other.chip_size}")
        self.chips.extend(other.chips)
        self.status = "ok" if self.chips else "empty"


@dataclass
class PairedDataset:
    """One-to-one HR/LR chip pairs with the degradation kernel used."""

    hr: List[ImageTensor]
    lr: List[ImageTensor]
    kernel: KernelSpec = KEYS

    def __len__(self) -> int:
        return len(self.hr)

    def ids(self) -> List[str]:
        return [chip_id(c) for c in self.hr]

    def fingerprint(self) -> str:
        """SHA-256 over the kernel, the chip ids and every HR and LR pixel."""
        digest = hashlib.sha256(self.kernel.model_dump_json().encode("utf-8"))
        for hr, lr in zip(self.hr, self.lr):
            digest.update(chip_id(hr).encode("utf-8"))
            digest.update(np.ascontiguousarray(hr.data, dtype=np.float64).tobytes())
            digest.update(np.ascontiguousarray(lr.data, dtype=np.float64).tobytes())
        return digest.hexdigest()


def chip_id(chip: ImageTensor) -> str:
    meta = chip.provenance
    if "scene" in meta and "x" in meta and "y" in meta:
        return f"{meta['scene']}_{meta['x']}_{meta['y']}"
    return str(meta.get("id", meta.get("source", "chip")))


def tile_scene(
    scene: ImageTensor,
    tile: int,
    scene_id: Optional[str] = None,
    label: Optional[str] = None,
) -> SceneChipSet:
    """Cut a scene into a non-overlapping grid of square tiles.

    Tiles are anchored at the top-left corner; remainder pixels on the right
    and bottom edges are dropped.

    Args:
        scene: Source scene
        tile: Tile edge in pixels
        scene_id: Identifier recorded in each chip's provenance
        label: Optional class label for the whole set

    Returns:
        Chip set; ``status == "empty"`` when the scene is smaller than a tile
    """
    if tile < 1:
        raise ValueError(f"tile must be >= 1, got {tile}")
    scene_id = scene_id or str(scene.provenance.get("scene", scene.provenance.get("source", "scene")))
    cols, rows = scene.width // tile, scene.height // tile
    if cols == 0 or rows == 0:
        logger.warning(f"Scene {scene_id} ({scene.width}x{scene.height}) is smaller than tile {tile}")
        return SceneChipSet([], label, "empty")

    chips = []
    for r in range(rows):
        for c in range(cols):
            x, y = c * tile, r * tile
            data = scene.data[:, y:y + tile, x:x + tile].copy()
            chips.append(scene.derive(data, scene=scene_id, x=x, y=y, tile=tile))
    return SceneChipSet(chips, label)


def reassemble(chips: Sequence[ImageTensor]) -> ImageTensor:
    """Rebuild the cropped scene covered by a set of tiles from their provenance."""
    if not chips:
        raise DatasetError("No chips to reassemble")
    tile_h, tile_w = chips[0].height, chips[0].width
    width = max(c.provenance["x"] for c in chips) + tile_w
    height = max(c.provenance["y"] for c in chips) + tile_h
    out = np.zeros((chips[0].channels, height, width), dtype=chips[0].data.dtype)
    for c in chips:
        x, y = c.provenance["x"], c.provenance["y"]
        out[:, y:y + tile_h, x:x + tile_w] = c.data
    meta = {"scene": chips[0].provenance.get("scene")}
    return ImageTensor(out, chips[0].convention, meta)


def make_pairs(
    chips: Union[SceneChipSet, Sequence[ImageTensor]],
    spec: KernelSpec = KEYS,
    expected_size: Optional[int] = 320,
) -> PairedDataset:
    """Degrade every HR chip by four, preserving order.

    Raises:
        DatasetError: If a chip is not ``expected_size`` square
        ResampleError: If a chip is not divisible by four
    """
    hr = list(chips)
    lr = []
    for chip in hr:
        if expected_size is not None and (chip.width, chip.height) != (expected_size, expected_size):
            raise DatasetError(
                f"Chip {chip_id(chip)} is {chip.width}x{chip.height}, expected {expected_size}px"
            )
        lr.append(degrade_4x(chip, spec))
    return PairedDataset(hr, lr, spec)


@dataclass
class Split:
    """Partitions of a dataset plus per-partition label proportions."""

    indices: List[List[int]]
    partitions: List[List[Any]]
    label_proportions: List[Dict[str, float]]

    @property
    def sizes(self) -> List[int]:
        return [len(p) for p in self.indices]


def partition_sizes(n: int, fractions: Sequence[float]) -> List[int]:
    """Integer sizes summing to ``n`` by the largest-remainder method."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"Split fractions must sum to 1, got {sum(fractions)}")
    if any(f < 0 for f in fractions):
        raise DatasetError("Split fractions must be non-negative")
    exact = [n * f for f in fractions]
    sizes = [math.floor(e) for e in exact]
    order = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split(
    items: Sequence[Any],
    fractions: Sequence[float],
    seed: int,
    labels: Optional[Sequence[str]] = None,
) -> Split:
    """Deterministic shuffled partition.

    Args:
        items: Dataset items
        fractions: Partition fractions summing to 1
        seed: Shuffle seed
        labels: Optional per-item labels for proportion reporting

    Returns:
        The split

    Raises:
        DatasetError: If a fraction rounds to an empty partition
    """
    sizes = partition_sizes(len(items), fractions)
    if any(s == 0 for s in sizes):
        raise DatasetError(f"Split of {len(items)} items by {list(fractions)} leaves an empty partition")

    order = np.random.default_rng(seed).permutation(len(items))
    indices, start = [], 0
    for size in sizes:
        indices.append([int(i) for i in order[start:start + size]])
        start += size

    proportions = []
    for part in indices:
        counts: Dict[str, float] = {}
        if labels is not None:
            for i in part:
                counts[labels[i]] = counts.get(labels[i], 0) + 1
            counts = {k: v / len(part) for k, v in sorted(counts.items())}
        proportions.append(counts)

    if labels is not None:
        for n, (part, props) in enumerate(zip(indices, proportions)):
            logger.info(f"Partition {n}: {len(part)} items, label proportions {props}")
    return Split(indices, [[items[i] for i in part] for part in indices], proportions)


def chip_path(root: Union[str, Path], label: str, chip: ImageTensor) -> Path:
    meta = chip.provenance
    return Path(root) / label / f"{meta['scene']}_{meta['x']}_{meta['y']}.png"


def write_chips(chips: SceneChipSet, root: Union[str, Path], label: Optional[str] = None) -> List[Path]:
    """Save a chip set under ``root/<label>/``."""
    label = label or chips.label or "unlabeled"
    return [save_image(c, chip_path(root, label, c)) for c in chips]


def read_chips(directory: Union[str, Path], label: Optional[str] = None) -> SceneChipSet:
    """Load every PNG chip in a class directory, sorted by file name.

    Raises:
        DatasetError: If chips differ in size
    """
    directory = Path(directory)
    chips = []
    for path in sorted(directory.glob("*.png")):
        chip = load_image(path)
        match = CHIP_NAME.match(path.stem)
        if match:
            chip.provenance.update(
                scene=match["scene"], x=int(match["x"]), y=int(match["y"])
            )
        else:
            chip.provenance["id"] = path.stem
        chips.append(chip)
    result = SceneChipSet(chips, label or directory.name, "ok" if chips else "empty")
    sizes = {(c.width, c.height) for c in chips}
    if len(sizes) > 1:
        raise DatasetError(f"Chips in {directory} have mixed sizes {sorted(sizes)}")
    return result


def read_dataset(root: Union[str, Path]) -> Dict[str, SceneChipSet]:
    """Load ``root/<class>/*.png`` into one chip set per class directory."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"Dataset root {root} does not exist")
    return {d.name: read_chips(d) for d in sorted(root.iterdir()) if d.is_dir()}

