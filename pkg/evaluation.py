"""
Average-recall evaluation of region proposals.

Matching is greedy and gt-major: ground truths are visited in index order and
each takes its highest-IoU unmatched proposal among the top k, provided that
IoU reaches the threshold. Proposals are ranked by score, ties by box
coordinates, so reordering equal-score proposals never changes the result.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from box_geometry import ProposalSet, as_box_array, iou_matrix, paired_iou
from errors import EvaluationError, ShapeError

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DEFAULT_BUDGETS = (10, 100, 300, 1000)
SIZE_BUCKETS = ("small", "medium", "large")


@dataclass
class RecallReport:
    ar_at_k: Dict[int, float] = field(default_factory=dict)
    recalls: Dict[Tuple[int, float], float] = field(default_factory=dict)
    ar_by_size: Dict[int, Dict[str, Optional[float]]] = field(default_factory=dict)

    def detail_frame(self) -> pd.DataFrame:
        rows = [{"k": k, "iou_threshold": thr, "recall": r} for (k, thr), r in sorted(self.recalls.items())]
        return pd.DataFrame(rows, columns=["k", "iou_threshold", "recall"])

    def summary_frame(self) -> pd.DataFrame:
        rows = []
        for k in sorted(self.ar_at_k):
            sizes = self.ar_by_size.get(k, {})
            rows.append({
                "k": k,
                "AR": self.ar_at_k[k],
                "AR_S": sizes.get("small"),
                "AR_M": sizes.get("medium"),
                "AR_L": sizes.get("large"),
            })
        return pd.DataFrame(rows, columns=["k", "AR", "AR_S", "AR_M", "AR_L"])


def _ranked_boxes(proposals: ProposalSet, k: int) -> np.ndarray:
    """Top-k boxes by descending score, equal scores ordered by (x, y, w, h)"""
    boxes = as_box_array(proposals.boxes)
    if len(boxes) == 0:
        return boxes
    scores = np.asarray(proposals.scores, dtype=np.float64)
    order = np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))
    return boxes[order[:k]]


def match_proposals(proposal_boxes: np.ndarray, gt_boxes: np.ndarray,
                    iou_threshold: float) -> List[Tuple[int, int]]:
    """(gt index, proposal index or -1) for every gt, greedy in gt order"""
    gt_boxes = as_box_array(gt_boxes)
    proposal_boxes = as_box_array(proposal_boxes)
    if len(proposal_boxes) == 0:
        return [(g, -1) for g in range(len(gt_boxes))]

    ious = iou_matrix(gt_boxes, proposal_boxes)
    used = np.zeros(len(proposal_boxes), dtype=bool)
    matches = []
    for g in range(len(gt_boxes)):
        candidates = np.where(used, -1.0, ious[g])
        best = int(np.argmax(candidates))
        if candidates[best] >= iou_threshold:
            used[best] = True
            matches.append((g, best))
        else:
            matches.append((g, -1))
    return matches


def _check_inputs(proposals: Sequence[ProposalSet], gts: Sequence, k: int):
    if k < 1:
        raise EvaluationError(f"proposal budget must be >= 1, got {k}")
    if len(proposals) != len(gts):
        raise ShapeError("one proposal set per image is required", len(gts), len(proposals))


def _matched_counts(proposals, gts, k: int, thresholds, gt_filter=None) -> Tuple[np.ndarray, int]:
    """Matched-gt counts per threshold and the number of gts considered"""
    counts = np.zeros(len(thresholds), dtype=np.int64)
    total = 0
    for props, image_gts in zip(proposals, gts):
        image_gts = as_box_array(image_gts)
        if gt_filter is not None:
            image_gts = image_gts[gt_filter(image_gts)]
        total += len(image_gts)
        if len(image_gts) == 0:
            continue
        top = _ranked_boxes(props, k)
        for t, thr in enumerate(thresholds):
            counts[t] += sum(1 for _, p in match_proposals(top, image_gts, thr) if p >= 0)
    return counts, total


def recall_at(proposals: Sequence[ProposalSet], gts: Sequence, k: int, iou_thr: float) -> float:
    """Fraction of all gts matched by the top-k proposals of their image at iou_thr"""
    _check_inputs(proposals, gts, k)
    counts, total = _matched_counts(proposals, gts, k, (iou_thr,))
    if total == 0:
        raise EvaluationError("recall is undefined without ground-truth boxes")
    return float(counts[0] / total)


def average_recall(proposals: Sequence[ProposalSet], gts: Sequence, k: int) -> float:
    """Mean recall over IoU thresholds 0.5, 0.55, ..., 0.95"""
    _check_inputs(proposals, gts, k)
    counts, total = _matched_counts(proposals, gts, k, IOU_THRESHOLDS)
    if total == 0:
        raise EvaluationError("average recall is undefined without ground-truth boxes")
    return float(np.mean(counts / total))


def default_size_cuts(max_size: float) -> Tuple[float, float]:
    """Area cut points at 1/9 and 1/3 of the largest synthetic object area"""
    area = float(max_size) ** 2
    return area / 9.0, area / 3.0


def _size_filter(bucket: str, cuts: Tuple[float, float]):
    low, high = cuts

    def keep(boxes: np.ndarray) -> np.ndarray:
        area = boxes[:, 2] * boxes[:, 3]
        if bucket == "small":
            return area < low
        if bucket == "medium":
            return (area >= low) & (area < high)
        return area >= high

    return keep


def evaluate(proposals: Sequence[ProposalSet], gts: Sequence, ks: Iterable[int] = DEFAULT_BUDGETS,
             size_cuts: Tuple[float, float] = None) -> RecallReport:
    """Full recall report; size-bucketed AR only when size_cuts is given"""
    report = RecallReport()
    for k in sorted(set(ks)):
        _check_inputs(proposals, gts, k)
        counts, total = _matched_counts(proposals, gts, k, IOU_THRESHOLDS)
        if total == 0:
            raise EvaluationError("average recall is undefined without ground-truth boxes")
        recalls = counts / total
        for thr, r in zip(IOU_THRESHOLDS, recalls):
            report.recalls[(k, thr)] = float(r)
        report.ar_at_k[k] = float(np.mean(recalls))

        if size_cuts is not None:
            sizes = {}
            for bucket in SIZE_BUCKETS:
                b_counts, b_total = _matched_counts(proposals, gts, k, IOU_THRESHOLDS, _size_filter(bucket, size_cuts))
                sizes[bucket] = float(np.mean(b_counts / b_total)) if b_total else None
            report.ar_by_size[k] = sizes

    check_monotone(report)
    logger.debug("AR per budget: %s", report.ar_at_k)
    return report


def check_monotone(report: RecallReport):
    """Recall non-increasing in threshold, AR non-decreasing in k; raises EvaluationError otherwise"""
    for k in report.ar_at_k:
        series = [report.recalls[(k, thr)] for thr in IOU_THRESHOLDS]
        if any(b > a for a, b in zip(series, series[1:])):
            raise EvaluationError(f"recall increases with IoU threshold at k={k}: {series}")
    ars = [report.ar_at_k[k] for k in sorted(report.ar_at_k)]
    if any(b < a for a, b in zip(ars, ars[1:])):
        raise EvaluationError(f"AR decreases with proposal budget: {ars}")


def stage_mean_iou(records: Iterable[Tuple[Sequence[np.ndarray], np.ndarray, np.ndarray]]) -> np.ndarray:
    """
    Mean IoU per stage between refined boxes and their matched gts.

    Each record is (boxes per stage, gts, matched_gt) for one image, where
    matched_gt holds a gt index per anchor or -1; only matched anchors count.
    """
    sums, count = None, 0
    for stage_boxes, gts, matched in records:
        keep = np.flatnonzero(matched >= 0)
        if sums is None:
            sums = np.zeros(len(stage_boxes))
        if len(keep) == 0:
            continue
        target = as_box_array(gts)[matched[keep]]
        for s, boxes in enumerate(stage_boxes):
            sums[s] += paired_iou(as_box_array(boxes)[keep], target).sum()
        count += len(keep)
    if sums is None or count == 0:
        raise EvaluationError("no matched anchors to measure refinement IoU")
    return sums / count
