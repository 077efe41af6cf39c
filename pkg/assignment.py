"""
Sample discrimination for each cascade stage.

Stage 1 labels anchors with the anchor-free rule (anchor center inside an
object's scaled center region, with a surrounding ignore region); later stages
use the anchor-based IoU rule. Regression targets of positives are encoded
against the anchor and standardized with per-stage target statistics.
"""

from dataclasses import dataclass, field
from typing import Sequence, Tuple, Union

import numpy as np

from box_geometry import Box, Delta, as_box_array, encode_boxes, iou_matrix
from errors import ConfigError, StatisticsError

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

ANCHOR_FREE = "anchor_free"
ANCHOR_BASED = "anchor_based"

STD_FLOOR = 1e-3


@dataclass(frozen=True)
class AssignmentConfig:
    sigma_ctr: float = 0.2
    sigma_ign: float = 0.5
    iou_pos: float = 0.7
    iou_neg: float = 0.3
    stage_metric: str = ANCHOR_FREE

    def __post_init__(self):
        if not 0 < self.sigma_ctr <= self.sigma_ign <= 1:
            raise ConfigError(
                f"need 0 < sigma_ctr <= sigma_ign <= 1, got {self.sigma_ctr}, {self.sigma_ign}", "sigma_ctr")
        if not 0 < self.iou_neg <= self.iou_pos < 1:
            raise ConfigError(f"need 0 < iou_neg <= iou_pos < 1, got {self.iou_neg}, {self.iou_pos}", "iou_pos")
        if self.stage_metric not in (ANCHOR_FREE, ANCHOR_BASED):
            raise ConfigError(f"unknown stage metric '{self.stage_metric}'", "stage_metric")


@dataclass
class TargetStats:
    """Componentwise mean/std of regression targets (dx, dy, dw, dh)"""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(4))
    std: np.ndarray = field(default_factory=lambda: np.ones(4))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(4)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(4)
        if np.any(self.std < STD_FLOOR) or not np.all(np.isfinite(self.std)) or not np.all(np.isfinite(self.mean)):
            raise StatisticsError(f"invalid target statistics: mean={self.mean}, std={self.std}")

    @classmethod
    def identity(cls) -> "TargetStats":
        return cls(np.zeros(4), np.ones(4))

    @property
    def mean_delta(self) -> Delta:
        return Delta.from_array(self.mean)

    @property
    def std_delta(self) -> Delta:
        return Delta.from_array(self.std)


@dataclass
class AssignmentResult:
    """Per-anchor labels, matched gt index (-1 when none) and normalized targets (zero unless positive)"""

    labels: np.ndarray
    matched_gt: np.ndarray
    targets: np.ndarray

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negative_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)

    @property
    def num_positive(self) -> int:
        return int(np.sum(self.labels == POSITIVE))


def unmatched_gts(result: AssignmentResult, num_gts: int) -> np.ndarray:
    """Indices of gts that no positive anchor was matched to"""
    matched = np.unique(result.matched_gt[result.positive_indices])
    return np.setdiff1d(np.arange(num_gts), matched)


def _empty_result(num_anchors: int) -> AssignmentResult:
    return AssignmentResult(
        labels=np.full(num_anchors, NEGATIVE, dtype=np.int8),
        matched_gt=np.full(num_anchors, -1, dtype=np.int64),
        targets=np.zeros((num_anchors, 4)),
    )


def _fill_targets(result: AssignmentResult, anchors: np.ndarray, gts: np.ndarray, stats: TargetStats):
    pos = result.positive_indices
    if len(pos):
        raw = encode_boxes(anchors[pos], gts[result.matched_gt[pos]])
        result.targets[pos] = normalize_targets(raw, stats) if stats is not None else raw


def _region_mask(anchors: np.ndarray, gts: np.ndarray, sigma: float) -> np.ndarray:
    """(N, M) mask: anchor center inside gt scaled by sigma about its center, boundary inclusive"""
    half_w = sigma * gts[:, 2] / 2
    half_h = sigma * gts[:, 3] / 2
    inside_x = np.abs(anchors[:, None, 0] - gts[None, :, 0]) <= half_w[None, :]
    inside_y = np.abs(anchors[:, None, 1] - gts[None, :, 1]) <= half_h[None, :]
    return inside_x & inside_y


def assign_anchor_free(anchors: Union[np.ndarray, Sequence[Box]], gts: Union[np.ndarray, Sequence[Box]],
                       cfg: AssignmentConfig, stats: TargetStats = None) -> AssignmentResult:
    """Positive when the anchor center is in some gt's center region; smallest such gt wins"""
    if cfg.stage_metric != ANCHOR_FREE:
        raise ConfigError("assign_anchor_free needs an anchor_free config", "stage_metric")
    anchors, gts = as_box_array(anchors), as_box_array(gts)
    result = _empty_result(len(anchors))
    if len(gts) == 0 or len(anchors) == 0:
        return result

    in_center = _region_mask(anchors, gts, cfg.sigma_ctr)
    in_ignore = _region_mask(anchors, gts, cfg.sigma_ign)

    areas = gts[:, 2] * gts[:, 3]
    masked_areas = np.where(in_center, areas[None, :], np.inf)
    smallest = np.argmin(masked_areas, axis=1)

    positive = in_center.any(axis=1)
    result.labels[positive] = POSITIVE
    result.matched_gt[positive] = smallest[positive]
    result.labels[in_ignore.any(axis=1) & ~positive] = IGNORE

    _fill_targets(result, anchors, gts, stats)
    return result


def assign_anchor_based(anchors: Union[np.ndarray, Sequence[Box]], gts: Union[np.ndarray, Sequence[Box]],
                        cfg: AssignmentConfig, stats: TargetStats = None) -> AssignmentResult:
    """IoU thresholds plus the best anchor of every gt forced positive"""
    if cfg.stage_metric != ANCHOR_BASED:
        raise ConfigError("assign_anchor_based needs an anchor_based config", "stage_metric")
    anchors, gts = as_box_array(anchors), as_box_array(gts)
    result = _empty_result(len(anchors))
    if len(gts) == 0 or len(anchors) == 0:
        return result

    ious = iou_matrix(anchors, gts)
    max_iou = ious.max(axis=1)
    best_gt = ious.argmax(axis=1)

    positive = max_iou > cfg.iou_pos
    result.labels[positive] = POSITIVE
    result.labels[(max_iou >= cfg.iou_neg) & ~positive] = IGNORE
    result.matched_gt[positive] = best_gt[positive]

    # every gt keeps at least its best-overlapping anchor
    best_anchor = ious.argmax(axis=0)
    for gt_index, anchor_index in enumerate(best_anchor):
        if ious[anchor_index, gt_index] > 0:
            result.labels[anchor_index] = POSITIVE
            result.matched_gt[anchor_index] = gt_index

    _fill_targets(result, anchors, gts, stats)
    return result


def assign(anchors, gts, cfg: AssignmentConfig, stats: TargetStats = None) -> AssignmentResult:
    """Dispatch on the stage metric of cfg"""
    if cfg.stage_metric == ANCHOR_FREE:
        return assign_anchor_free(anchors, gts, cfg, stats)
    return assign_anchor_based(anchors, gts, cfg, stats)


def compute_target_stats(samples: Union[np.ndarray, Sequence[Delta]]) -> TargetStats:
    """Population mean/std of regression targets, std floored at 1e-3"""
    if isinstance(samples, np.ndarray):
        array = samples.astype(np.float64).reshape(-1, 4)
    else:
        array = np.array([s.as_array() for s in samples], dtype=np.float64).reshape(-1, 4)
    if len(array) < 2:
        raise StatisticsError(f"need at least 2 samples for target statistics, got {len(array)}")
    return TargetStats(array.mean(axis=0), np.maximum(array.std(axis=0), STD_FLOOR))


def normalize_targets(t: Union[Delta, np.ndarray], stats: TargetStats) -> Union[Delta, np.ndarray]:
    if isinstance(t, Delta):
        return Delta.from_array((t.as_array() - stats.mean) / stats.std)
    return (t - stats.mean) / stats.std


def denormalize_prediction(d: Union[Delta, np.ndarray], stats: TargetStats) -> Union[Delta, np.ndarray]:
    if isinstance(d, Delta):
        return Delta.from_array(d.as_array() * stats.std + stats.mean)
    return d * stats.std + stats.mean


class BalancedSampler:
    """
    Picks the anchors that enter the classification loss.

    All positives up to half the per-image cap, plus random negatives at
    `negative_ratio` per positive (at least `min_negatives` so that empty
    scenes still teach the classifier). Ignored anchors are never sampled.
    """

    def __init__(self, max_per_image: int = 256, negative_ratio: float = 1.0, min_negatives: int = 8):
        self.max_per_image = max_per_image
        self.negative_ratio = negative_ratio
        self.min_negatives = min_negatives

    def __call__(self, labels: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        positive = np.flatnonzero(labels == POSITIVE)
        negative = np.flatnonzero(labels == NEGATIVE)

        num_pos = min(len(positive), self.max_per_image // 2)
        if num_pos < len(positive):
            positive = np.sort(rng.permutation(positive)[:num_pos])

        wanted = max(int(round(num_pos * self.negative_ratio)), self.min_negatives)
        num_neg = min(len(negative), wanted, self.max_per_image - num_pos)
        if num_neg < len(negative):
            negative = np.sort(rng.permutation(negative)[:num_neg])
        return positive, negative
