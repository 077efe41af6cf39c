"""
Training orchestration for the cascade: target-statistics calibration, the
step learning-rate schedule and the minibatch SGD loop.

Images of a minibatch are processed independently (optionally on worker
threads) and their gradients are summed in the batch's image order, so the
thread count never changes the result. Epoch order and per-image flips come
from generators keyed by (seed, epoch) and (seed, epoch, scene_id).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd

from assignment import TargetStats, assign, compute_target_stats
from box_geometry import as_box_array, build_anchor_level, decode_boxes
from cascade_pipeline import CascadeModel, PipelineConfig, StepLoss, compute_loss_and_grads, flatten_grads, predict
from csv_processor import CSVProcessor
from errors import ConfigError, EvaluationError, TrainingDivergedError
from evaluation import average_recall
from synth_data import Scene, flip_scene
from tensor_core import sgd_step

logger = logging.getLogger(__name__)

# oracle-refined anchors move this far (in delta space) toward their gt
CALIBRATION_SHRINK = 0.5


@dataclass
class TrainResult:
    model: CascadeModel
    buffers: List[np.ndarray]
    epoch: int
    metrics: pd.DataFrame


def _initial_anchors(scene: Scene, cfg: PipelineConfig) -> np.ndarray:
    w, h = scene.size
    return np.concatenate([build_anchor_level(w, h, lvl.stride, lvl.base_size).anchors for lvl in cfg.levels])


def _as_stored(stats: TargetStats) -> TargetStats:
    # checkpoints hold f32, keep the in-memory copy identical so resumed runs match
    return TargetStats(stats.mean.astype(np.float32), stats.std.astype(np.float32))


def calibrate_stats(scenes: Sequence[Scene], cfg: PipelineConfig) -> List[TargetStats]:
    """
    Per-stage mean/std of raw regression targets.

    Stage 1 measures the uniform anchors against the gts. Each later stage
    measures "oracle-refined" anchors: every positive of the previous stage
    moved halfway toward its matched gt, which stands in for a trained stage.
    """
    if not cfg.use_stats:
        return [TargetStats.identity() for _ in range(cfg.num_stages)]

    current = [_initial_anchors(scene, cfg) for scene in scenes]
    stats = []
    for stage in range(1, cfg.num_stages + 1):
        samples, refined = [], []
        for scene, anchors in zip(scenes, current):
            result = assign(anchors, scene.gts, cfg.stage_assign[stage - 1])
            pos = result.positive_indices
            samples.append(result.targets[pos])
            moved = anchors.copy()
            moved[pos] = decode_boxes(anchors[pos], CALIBRATION_SHRINK * result.targets[pos])
            refined.append(moved)
        pooled = np.concatenate(samples) if samples else np.zeros((0, 4))
        if len(pooled) < 2:
            logger.warning("stage %d: %d positive samples, using identity target statistics", stage, len(pooled))
            stats.append(TargetStats.identity())
        else:
            stats.append(_as_stored(compute_target_stats(pooled)))
            logger.info("stage %d target stats: mean=%s std=%s (%d samples)",
                        stage, np.round(stats[-1].mean, 4), np.round(stats[-1].std, 4), len(pooled))
        current = refined
    return stats


def _image_step(scene: Scene, model: CascadeModel, cfg: PipelineConfig, epoch: int):
    rng = np.random.default_rng([cfg.seed, epoch, scene.scene_id])
    if rng.random() < cfg.flip_prob:
        scene = flip_scene(scene)
    step, grads, _, _ = compute_loss_and_grads(scene.image, scene.gts, cfg, model, rng)
    return step, flatten_grads(grads, model)


def validation_recall(scenes: Sequence[Scene], model: CascadeModel, cfg: PipelineConfig,
                      threads: int = 1) -> dict:
    """AR_10 and AR_100 on the given scenes; NaN when they hold no gts"""
    if not scenes:
        return {"ar_10": float("nan"), "ar_100": float("nan")}
    proposals = predict(scenes, model, cfg, threads)
    gts = [as_box_array(s.gts) for s in scenes]
    try:
        return {"ar_10": average_recall(proposals, gts, 10), "ar_100": average_recall(proposals, gts, 100)}
    except EvaluationError as e:
        logger.warning("validation recall skipped: %s", e)
        return {"ar_10": float("nan"), "ar_100": float("nan")}


def train(train_scenes: Sequence[Scene], val_scenes: Sequence[Scene], cfg: PipelineConfig,
          threads: int = 1, model: CascadeModel = None, buffers: List[np.ndarray] = None,
          start_epoch: int = 0, on_epoch: Optional[Callable[[TrainResult], None]] = None) -> TrainResult:
    """
    Train for epochs start_epoch..cfg.epochs-1.

    A fresh run initializes weights from cfg.seed and calibrates target
    statistics on the training scenes; a resumed run passes the checkpointed
    model, momentum buffers and epoch counter instead.
    """
    if not train_scenes:
        raise ConfigError("training set is empty", "dataset")
    if threads < 1:
        raise ConfigError(f"must be >= 1, got {threads}", "threads")

    if model is None:
        model = CascadeModel.initialize(cfg)
        model = model.with_stats(calibrate_stats(train_scenes, cfg))
    if buffers is None:
        buffers = [np.zeros_like(p) for p in model.flat_parameters()]

    processor = CSVProcessor(cfg.num_stages)
    rows = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = cfg.schedule.lr_at(epoch, cfg.epochs, cfg.batch_size)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_scenes))
            losses: List[StepLoss] = []

            for step, begin in enumerate(range(0, len(order), cfg.batch_size)):
                batch = [train_scenes[i] for i in order[begin:begin + cfg.batch_size]]

                def run(scene, current=model):
                    return _image_step(scene, current, cfg, epoch)

                results = list(pool.map(run, batch)) if pool else [run(s) for s in batch]

                for (loss, _), scene in zip(results, batch):
                    if not np.isfinite(loss.total):
                        raise TrainingDivergedError(
                            f"loss became {loss.total} at epoch {epoch}, step {step} (scene {scene.scene_id})",
                            epoch=epoch, step=step)
                    losses.append(loss)

                summed = [np.zeros_like(p) for p in model.flat_parameters()]
                for _, grads in results:
                    for acc, g in zip(summed, grads):
                        acc += g
                averaged = [g / len(batch) for g in summed]
                params, buffers = sgd_step(model.flat_parameters(), averaged, lr, cfg.momentum, buffers,
                                           cfg.weight_decay)
                model = model.with_parameters(params)

            row = {
                "epoch": epoch,
                "total_loss": float(np.mean([l.total for l in losses])),
                **{f"reg_loss_stage{t + 1}": float(np.mean([l.reg[t] for l in losses]))
                   for t in range(cfg.num_stages)},
                "cls_loss": float(np.mean([l.cls for l in losses])),
                **validation_recall(val_scenes, model, cfg, threads),
                "lr": lr,
            }
            rows.append(row)
            logger.info("epoch %d/%d loss=%.4f cls=%.4f AR_10=%.4f AR_100=%.4f lr=%g", epoch + 1, cfg.epochs,
                        row["total_loss"], row["cls_loss"], row["ar_10"], row["ar_100"], lr)
            if on_epoch is not None:
                on_epoch(TrainResult(model, buffers, epoch + 1, processor.metrics_frame(rows)))
    finally:
        if pool is not None:
            pool.shutdown()

    return TrainResult(model, buffers, max(start_epoch, cfg.epochs), processor.metrics_frame(rows))
