"""Regression and classification losses, each returning its value and analytic gradient"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from box_geometry import Box, Delta, to_corners
from errors import ConfigError

IOU_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Per-stage regression weights alpha and the balance term lam"""

    alpha: Tuple[float, ...] = (1.0, 1.0)
    lam: float = 10.0

    def __post_init__(self):
        if not self.alpha or any(a <= 0 for a in self.alpha):
            raise ConfigError(f"stage weights must be positive, got {self.alpha}", "alpha")
        if self.lam <= 0:
            raise ConfigError(f"balance term must be positive, got {self.lam}", "lam")


def smooth_l1_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Sum of smooth-L1 over all elements and its gradient w.r.t. pred"""
    diff = pred - target
    abs_diff = np.abs(diff)
    quadratic = abs_diff < 1.0
    loss = np.where(quadratic, 0.5 * diff * diff, abs_diff - 0.5)
    grad = np.where(quadratic, diff, np.sign(diff))
    return float(loss.sum()), grad


def smooth_l1(pred: Delta, target: Delta) -> Tuple[float, Delta]:
    loss, grad = smooth_l1_loss(pred.as_array(), target.as_array())
    return loss, Delta.from_array(grad)


def iou_loss_boxes(pred: np.ndarray, gt: np.ndarray, eps: float = IOU_EPS) -> Tuple[np.ndarray, np.ndarray]:
    """
    Row-wise -ln(max(IoU, eps)) of center-format boxes and the gradient w.r.t.
    pred (x, y, w, h). The gradient is zero wherever the eps floor is active.
    """
    cp, cg = to_corners(pred), to_corners(gt)

    right_from_pred = cp[:, 2] < cg[:, 2]
    left_from_pred = cp[:, 0] > cg[:, 0]
    bottom_from_pred = cp[:, 3] < cg[:, 3]
    top_from_pred = cp[:, 1] > cg[:, 1]

    inter_w = np.minimum(cp[:, 2], cg[:, 2]) - np.maximum(cp[:, 0], cg[:, 0])
    inter_h = np.minimum(cp[:, 3], cg[:, 3]) - np.maximum(cp[:, 1], cg[:, 1])
    overlapping = (inter_w > 0) & (inter_h > 0)
    inter_w = np.where(overlapping, inter_w, 0.0)
    inter_h = np.where(overlapping, inter_h, 0.0)

    inter = inter_w * inter_h
    union = pred[:, 2] * pred[:, 3] + gt[:, 2] * gt[:, 3] - inter
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    losses = -np.log(np.maximum(iou, eps))

    # d(inter_w)/d(x, w) and d(inter_h)/d(y, h)
    dw_dx = right_from_pred.astype(np.float64) - left_from_pred
    dw_dw = 0.5 * right_from_pred + 0.5 * left_from_pred
    dh_dy = bottom_from_pred.astype(np.float64) - top_from_pred
    dh_dh = 0.5 * bottom_from_pred + 0.5 * top_from_pred

    d_inter = np.stack([inter_h * dw_dx, inter_w * dh_dy, inter_h * dw_dw, inter_w * dh_dh], axis=1)
    d_union = -d_inter
    d_union[:, 2] += pred[:, 3]
    d_union[:, 3] += pred[:, 2]

    active = overlapping & (iou >= eps)
    safe_inter = np.where(active, inter, 1.0)
    safe_union = np.where(active, union, 1.0)
    grad = d_union / safe_union[:, None] - d_inter / safe_inter[:, None]
    return losses, np.where(active[:, None], grad, 0.0)


def iou_loss(pred_box: Box, gt_box: Box) -> Tuple[float, np.ndarray]:
    losses, grad = iou_loss_boxes(pred_box.as_array()[None], gt_box.as_array()[None])
    return float(losses[0]), grad[0]


def sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise binary cross-entropy in log-sum-exp form and its gradient"""
    losses = np.maximum(logits, 0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    return losses, sigmoid(logits) - labels


def bce(logit: float, label: int) -> Tuple[float, float]:
    losses, grad = bce_with_logits(np.array([logit], dtype=np.float64), np.array([label], dtype=np.float64))
    return float(losses[0]), float(grad[0])


def total_loss(stage_reg_losses: Sequence[float], cls_loss: float, w: LossWeights) -> float:
    """lam * sum_t alpha_t * reg_t + cls"""
    if len(stage_reg_losses) != len(w.alpha):
        raise ConfigError(
            f"{len(stage_reg_losses)} stage losses but {len(w.alpha)} stage weights", "alpha")
    weighted = sum(a * r for a, r in zip(w.alpha, stage_reg_losses))
    return float(w.lam * weighted + cls_loss)
