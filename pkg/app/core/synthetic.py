"""Deterministic synthetic mini-dataset: land-use scenes, ship chips, VOC labels and detections.

Layout written by :func:`write_mini_dataset`::

    <root>/scenes/<land_use>/<land_use>_<nn>.png
    <root>/ships/ship/ship_<nnnn>.png
    <root>/ships/no_ship/water_<nnnn>.png
    <root>/annotations/ship_<nnnn>.xml
    <root>/detections.csv
    <root>/experiment.toml
"""

import logging
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from app.core.detection import write_detections
from app.core.images import ImageTensor, save_image
from app.core.models import Annotation, AnnotationSet, Box, Detection
from app.core.voc import write_voc

logger = logging.getLogger(__name__)

LAND_USE_CLASSES = ("agricultural", "industrial")
SHIP_LABEL = "ship"
NO_SHIP_LABEL = "no_ship"


def _finish(pixels: np.ndarray, **provenance) -> ImageTensor:
    return ImageTensor(np.floor(np.clip(pixels, 0, 255) + 0.5), "byte", provenance)


def agricultural_scene(rng: np.random.Generator, width: int, height: int) -> ImageTensor:
    """Strips of crop fields in greens and browns with a light texture."""
    palette = np.array([[74, 112, 46], [112, 140, 60], [140, 110, 70], [96, 84, 52], [160, 150, 90]], float)
    img = np.empty((3, height, width))
    x = 0
    while x < width:
        w = int(rng.integers(24, 96))
        img[:, :, x:x + w] = palette[rng.integers(len(palette))][:, None, None]
        x += w
    rows = np.arange(height)[None, :, None]
    img += 6.0 * np.sin(rows / rng.uniform(2.0, 4.0))
    img += rng.normal(0.0, 4.0, img.shape)
    return _finish(img)


def industrial_scene(rng: np.random.Generator, width: int, height: int) -> ImageTensor:
    """Grey ground with bright roofs and dark roads."""
    img = np.full((3, height, width), 110.0) + rng.normal(0.0, 5.0, (3, height, width))
    for _ in range(int(width * height / 4000)):
        w, h = int(rng.integers(12, 60)), int(rng.integers(12, 60))
        x, y = int(rng.integers(0, width - w)), int(rng.integers(0, height - h))
        tone = rng.uniform(150, 235)
        img[:, y:y + h, x:x + w] = np.array([tone, tone, tone * rng.uniform(0.9, 1.05)])[:, None, None]
    for _ in range(3):
        y = int(rng.integers(0, height - 6))
        img[:, y:y + 6, :] = 55.0
        x = int(rng.integers(0, width - 6))
        img[:, :, x:x + 6] = 55.0
    return _finish(img)


SCENE_MAKERS = {"agricultural": agricultural_scene, "industrial": industrial_scene}


def water_chip(rng: np.random.Generator, size: int = 80) -> ImageTensor:
    """Open water: dark blue with gentle swell and noise."""
    yy, xx = np.mgrid[0:size, 0:size]
    swell = 5.0 * np.sin((xx * rng.uniform(0.1, 0.3) + yy * rng.uniform(0.1, 0.3)) + rng.uniform(0, 6.28))
    base = np.array([22.0, 52.0, 92.0])[:, None, None]
    img = base + swell[None] + rng.normal(0.0, 6.0, (3, size, size))
    return _finish(img)


def ship_chip(rng: np.random.Generator, size: int = 80) -> Tuple[ImageTensor, Box]:
    """Water with one bright axis-aligned hull; returns the chip and its 1-based inclusive box."""
    chip = water_chip(rng, size)
    length, beam = int(rng.integers(14, 31)), int(rng.integers(5, 9))
    w, h = (length, beam) if rng.random() < 0.5 else (beam, length)
    x0, y0 = int(rng.integers(2, size - w - 2)), int(rng.integers(2, size - h - 2))
    hull = rng.uniform(215, 250)
    chip.data[:, y0:y0 + h, x0:x0 + w] = hull
    chip.data[:, y0 + h // 2, x0:x0 + w] = hull - 60
    chip.data = np.floor(np.clip(chip.data, 0, 255) + 0.5)
    return chip, Box(xmin=x0 + 1, ymin=y0 + 1, xmax=x0 + w, ymax=y0 + h)


def ship_dataset(seed: int, count: int, size: int = 80) -> Tuple[List[ImageTensor], List[int], List[Box]]:
    """Alternating ship (label 1) and water (label 0) chips, ids ``synthetic_<n>``."""
    rng = np.random.default_rng(seed)
    images, labels, boxes = [], [], []
    for i in range(count):
        if i % 2:
            chip, box = ship_chip(rng, size)
            boxes.append(box)
        else:
            chip = water_chip(rng, size)
        chip.provenance["id"] = f"synthetic_{i:04d}"
        images.append(chip)
        labels.append(i % 2)
    return images, labels, boxes


def _jitter(rng: np.random.Generator, box: Box, size: int, amount: float) -> Box:
    x0, y0, x1, y1 = (v + rng.uniform(-amount, amount) for v in box.as_tuple())
    x0, y0 = max(1.0, round(x0, 1)), max(1.0, round(y0, 1))
    x1, y1 = min(float(size), round(x1, 1)), min(float(size), round(y1, 1))
    return Box(xmin=x0, ymin=y0, xmax=max(x1, x0 + 1), ymax=max(y1, y0 + 1))


def synthetic_detections(
    rng: np.random.Generator,
    ship_boxes: List[Tuple[str, Box]],
    water_ids: List[str],
    size: int = 80,
) -> List[Detection]:
    """Imperfect detector output: jittered hits, some duplicates, misses and false alarms."""
    detections = []
    for image_id, box in ship_boxes:
        if rng.random() < 0.1:
            continue
        detections.append(Detection(
            image_id=image_id, box=_jitter(rng, box, size, 2.0),
            confidence=round(float(rng.uniform(0.6, 0.99)), 4), class_name=SHIP_LABEL,
        ))
        if rng.random() < 0.25:
            detections.append(Detection(
                image_id=image_id, box=_jitter(rng, box, size, 4.0),
                confidence=round(float(rng.uniform(0.3, 0.6)), 4), class_name=SHIP_LABEL,
            ))
    for image_id in water_ids[::4]:
        x, y = float(rng.integers(1, size - 20)), float(rng.integers(1, size - 10))
        detections.append(Detection(
            image_id=image_id, box=Box(xmin=x, ymin=y, xmax=x + 18, ymax=y + 7),
            confidence=round(float(rng.uniform(0.05, 0.5)), 4), class_name=SHIP_LABEL,
        ))
    return detections


CONFIG_TEMPLATE = """\
# Synthetic mini-dataset experiment (generated by `srwb synth`)
jobs = 1

[seeds]
split = {seed}
srgan = {seed_srgan}
classifier = {seed_classifier}

[dataset]
tile = 320
test_fraction = 0.25

[dataset.scenes]
agricultural = "scenes/agricultural"
industrial = "scenes/industrial"

[degradation]
family = "keys_bicubic"
a = -0.5

[baseline]
family = "mitchell_netravali"
b = 0.3333333333333333
c = 0.3333333333333333

[srgan]
iterations = 2
batch_size = 2
preview_every = 1
checkpoint_every = 1

[srgan.generator]
residual_blocks = 1
base_channels = 8

[srgan.discriminator]
base_channels = 4
dense_units = 16

[srgan.feature_extractor]
channels = [4, 8]

[sweep]
kernels = [
    {{ family = "keys_bicubic", a = -0.5 }},
    {{ family = "bilinear" }},
]

[classifier]
data = "ships"
test_fraction = 0.25
sources = ["raw", "scaled", "sr"]
conv_channels = 4
latent_channels = 4
dense_units = 8
epochs = 2

[detection]
annotations = "annotations"
detections = "detections.csv"
iou_threshold = 0.5
interpolation = "all_point"

[report]
montage_count = 3
"""


def write_mini_dataset(
    root: Union[str, Path],
    seed: int = 0,
    scenes_per_class: int = 8,
    ship_chips: int = 24,
    scene_size: Tuple[int, int] = (650, 330),
) -> Path:
    """Write the bundled synthetic dataset and a matching experiment config.

    Args:
        root: Output directory
        seed: Master seed; identical seeds give byte-identical files
        scenes_per_class: Scenes per land-use class
        ship_chips: Chips per ship / no-ship class
        scene_size: Scene (width, height); the default leaves a remainder when tiled at 320

    Returns:
        Path of the written ``experiment.toml``
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    width, height = scene_size

    for land_use in LAND_USE_CLASSES:
        for i in range(scenes_per_class):
            scene = SCENE_MAKERS[land_use](rng, width, height)
            save_image(scene, root / "scenes" / land_use / f"{land_use}_{i:02d}.png")
        logger.info(f"Wrote {scenes_per_class} {land_use} scenes")

    ship_boxes, water_ids = [], []
    for i in range(ship_chips):
        chip, box = ship_chip(rng)
        image_id = f"ship_{i:04d}"
        save_image(chip, root / "ships" / SHIP_LABEL / f"{image_id}.png")
        write_voc(
            AnnotationSet(filename=f"{image_id}.png", width=80, height=80,
                          objects=[Annotation(name=SHIP_LABEL, box=box)]),
            root / "annotations" / f"{image_id}.xml",
        )
        ship_boxes.append((image_id, box))

        water_id = f"water_{i:04d}"
        save_image(water_chip(rng), root / "ships" / NO_SHIP_LABEL / f"{water_id}.png")
        water_ids.append(water_id)
    logger.info(f"Wrote {ship_chips} ship and {ship_chips} water chips")

    write_detections(synthetic_detections(rng, ship_boxes, water_ids), root / "detections.csv")

    config_path = root / "experiment.toml"
    config_path.write_text(
        CONFIG_TEMPLATE.format(seed=seed, seed_srgan=seed + 1, seed_classifier=seed + 2), encoding="utf-8"
    )
    logger.info(f"Synthetic mini-dataset ready at {root}")
    return config_path
