import logging
from pathlib import Path
from typing import Dict

from app.core.errors import DatasetError, ImageDecodeError, UnsupportedImageError
from app.core.images import load_image, save_image
from app.core.resample import upscale_4x
from app.core.tiling import SceneChipSet, chip_path, make_pairs, read_chips, split, tile_scene, write_chips
from app.workflows import layout
from app.workflows.manifest import RunContext, StageResult

SPLITS = ("train", "test")


def tile(ctx: RunContext) -> StageResult:
    """Tile every land-use scene and split the chips into train and test sets.

    Args:
        ctx: Run context

    Returns:
        Chip files under ``chips/<split>/<class>/``

    Raises:
        DatasetError: If a class yields fewer than two chips
    """
    cfg = ctx.config
    result = StageResult(details={"tile": cfg.dataset.tile, "classes": {}})
    for split_name in SPLITS:
        layout.reset_dir(layout.chips_root(ctx, split_name))

    for name, scene_dir in sorted(cfg.dataset.scenes.items()):
        chips = SceneChipSet(label=name, status="empty")
        scenes, skipped = 0, 0
        for path in sorted(Path(scene_dir).glob("*.png")):
            try:
                scene = load_image(path)
            except (ImageDecodeError, UnsupportedImageError) as e:
                logging.error(f"Skipping scene {path}: {e}")
                skipped += 1
                continue
            chips.extend(tile_scene(scene, cfg.dataset.tile, scene_id=path.stem, label=name))
            scenes += 1

        if len(chips) < 2:
            raise DatasetError(f"Dataset '{name}' produced {len(chips)} chips; a train/test split needs two")
        fractions = (1.0 - cfg.dataset.test_fraction, cfg.dataset.test_fraction)
        parts = split(chips.chips, fractions, cfg.seeds.split)
        for split_name, part in zip(SPLITS, parts.partitions):
            result.artifacts += write_chips(SceneChipSet(part, name), layout.chips_root(ctx, split_name), name)

        train_count, test_count = parts.sizes
        result.details["classes"][name] = {
            "scenes": scenes, "skipped": skipped, "train": train_count, "test": test_count,
        }
        logging.info(f"Tiled {scenes} {name} scenes into {len(chips)} chips ({train_count} train / {test_count} test)")
    return result


def degrade(ctx: RunContext) -> StageResult:
    """Build 4x-degraded LR chips for both splits with the configured kernel."""
    cfg = ctx.config
    result = StageResult(details={"kernel": cfg.degradation.label(), "pairs": {}})
    for split_name in SPLITS:
        out_root = layout.reset_dir(layout.lr_root(ctx, split_name))
        for name in sorted(cfg.dataset.scenes):
            hr = read_chips(layout.chips_root(ctx, split_name) / name, name)
            pairs = make_pairs(hr, cfg.degradation, expected_size=cfg.dataset.tile)
            for hr_chip, lr_chip in zip(pairs.hr, pairs.lr):
                result.artifacts.append(save_image(lr_chip, chip_path(out_root, name, hr_chip)))
            result.details["pairs"][f"{split_name}/{name}"] = len(pairs)
            logging.info(f"Degraded {len(pairs)} {split_name} chips of {name} with {cfg.degradation.label()}")
    return result


def scale(ctx: RunContext) -> StageResult:
    """Scaled baseline: enlarge the test LR chips by four with the baseline kernel."""
    cfg = ctx.config
    out_root = layout.reset_dir(layout.baseline_root(ctx))
    counts: Dict[str, int] = {}
    result = StageResult()
    for name in sorted(cfg.dataset.scenes):
        lr = read_chips(layout.lr_root(ctx, "test") / name, name)
        for chip in lr:
            result.artifacts.append(save_image(upscale_4x(chip, cfg.baseline), chip_path(out_root, name, chip)))
        counts[name] = len(lr)
        logging.info(f"Scaled {len(lr)} {name} test chips with {cfg.baseline.label()}")
    result.details = {"kernel": cfg.baseline.label(), "chips": counts}
    return result
