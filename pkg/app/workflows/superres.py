import logging
import time
from typing import Optional

from app.core.errors import CheckpointError, DatasetError, TrainingDivergedError, WorkbenchError
from app.core.images import denormalize, save_image
from app.core.srgan import SrCheckpoint, SrganConfig, as_sr_model, load_checkpoint, save_checkpoint, train
from app.core.tiling import PairedDataset, chip_path, read_chips
from app.workflows import layout
from app.workflows.manifest import RunContext, StageResult


def _resumable(ctx: RunContext, model: str, config: SrganConfig, data_key: str) -> Optional[SrCheckpoint]:
    """An earlier checkpoint of the same model and pairs that only differs in its iteration budget."""
    path = layout.model_path(ctx, model)
    if ctx.force or not path.exists():
        return None
    try:
        ckpt = load_checkpoint(path)
    except CheckpointError as e:
        logging.warning(f"Ignoring unreadable checkpoint {path}: {e}")
        return None
    if ckpt.config.model_copy(update={"iterations": config.iterations}) != config:
        return None
    if ckpt.data_key != data_key:
        logging.info(f"Checkpoint {path} was trained on other pairs; starting {model} afresh")
        return None
    if ckpt.iteration > config.iterations:
        return None
    return ckpt


def train_sr(ctx: RunContext) -> StageResult:
    """Train one SRGAN per land-use dataset on its train pairs.

    A checkpoint left by an earlier run with the same settings and the same
    train pairs is resumed, so raising ``iterations`` continues training
    instead of restarting it. Any change to the chips or the degradation
    kernel starts from fresh weights.

    Raises:
        TrainingDivergedError: When a loss turns non-finite; the last periodic
            snapshot is saved next to the model as ``<model>.diverged.ckpt``
    """
    cfg = ctx.config
    result = StageResult(details={"models": {}})
    for index, name in enumerate(cfg.sr_models()):
        hr = read_chips(layout.chips_root(ctx, "train") / name, name)
        lr = read_chips(layout.lr_root(ctx, "train") / name, name)
        if hr.ids() != lr.ids():
            raise DatasetError(f"HR and LR train chips of '{name}' do not line up; rerun 'degrade'")
        pairs = PairedDataset(hr.chips, lr.chips, cfg.degradation)
        sr_config = cfg.srgan.srgan_config(cfg.seeds.srgan + index, cfg.lr_size)

        resume = _resumable(ctx, name, sr_config, pairs.fingerprint())
        loss_log = layout.loss_log_path(ctx, name)
        previews = layout.previews_dir(ctx, name)
        if resume is None:
            loss_log.unlink(missing_ok=True)
            layout.reset_dir(previews)
        else:
            logging.info(f"Resuming {name} from iteration {resume.iteration}")
            previews.mkdir(parents=True, exist_ok=True)

        logging.info(f"Training SRGAN '{name}' on {len(pairs)} pairs for {sr_config.iterations} iterations")
        try:
            trained = train(pairs, sr_config, resume=resume, loss_log=loss_log)
        except TrainingDivergedError as e:
            if e.last_checkpoint is not None:
                save_checkpoint(e.last_checkpoint, ctx.path(layout.MODELS, f"{name}.diverged.ckpt"))
            logging.error(f"SRGAN '{name}' diverged at iteration {e.iteration}")
            raise

        ckpt = trained.checkpoint
        ckpt.config = sr_config
        result.artifacts.append(save_checkpoint(ckpt, layout.model_path(ctx, name)))
        if loss_log.exists():
            result.artifacts.append(loss_log)
        for iteration, preview in trained.previews:
            save_image(denormalize(preview), previews / f"iter_{iteration:05d}.png")
        result.artifacts += sorted(previews.glob("*.png"))

        last = trained.history[-1] if trained.history else None
        result.details["models"][name] = {
            "pairs": len(pairs),
            "seed": sr_config.seed,
            "iterations": ckpt.iteration,
            "parameters": ckpt.generator.num_parameters(),
            "final": last.model_dump() if last else None,
        }
    return result


def infer_sr(ctx: RunContext) -> StageResult:
    """Super-resolve every test LR chip with every trained model, timing the generator."""
    cfg = ctx.config
    result = StageResult(details={"throughput": {}})
    for name in cfg.sr_models():
        model = as_sr_model(load_checkpoint(layout.model_path(ctx, name)))
        out_root = layout.reset_dir(layout.sr_root(ctx, name))
        count, skipped, seconds = 0, 0, 0.0
        for dataset in sorted(cfg.dataset.scenes):
            for chip in read_chips(layout.lr_root(ctx, "test") / dataset, dataset):
                try:
                    start = time.perf_counter()
                    sr = model(chip)
                    seconds += time.perf_counter() - start
                except WorkbenchError as e:
                    logging.warning(f"Model {name} skipped chip {chip.provenance}: {e}")
                    skipped += 1
                    continue
                result.artifacts.append(save_image(sr, chip_path(out_root, dataset, chip)))
                count += 1
        rate = count / seconds if seconds > 0 else 0.0
        result.details["throughput"][name] = {
            "images": count, "skipped": skipped, "seconds": round(seconds, 4), "images_per_second": round(rate, 3),
        }
        logging.info(f"Model {name}: {count} chips super-resolved at {rate:.2f} images/s")
    return result
