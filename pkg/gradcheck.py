"""
Finite-difference verification of every analytic gradient.

Each check draws random float64 instances, compares the analytic gradient
with central differences and records the worst relative error
|a - n| / max(|a|, |n|, floor). The end-to-end check runs a tiny cascade
(8x8 image, one level, two stages) with the stage-2 input anchors and the
classification sampling frozen, which is exactly the stop-gradient graph
the trainer differentiates.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from cascade_pipeline import (
    BackboneSpec,
    CascadeModel,
    LevelSpec,
    PipelineConfig,
    compute_loss_and_grads,
    flatten_grads,
    forward_cascade,
)
from errors import ConfigError
from losses import bce_with_logits, iou_loss_boxes, smooth_l1_loss
from tensor_core import ConvParams, adaptive_conv, adaptive_conv_backward, conv2d, conv2d_backward

logger = logging.getLogger(__name__)

OP_TOLERANCE = 1e-4
PIPELINE_TOLERANCE = 1e-3
ERROR_FLOOR = 1e-3
STEP = 1e-6
PIPELINE_STEP = 1e-5
PIPELINE_COORDS = 12
# coarse vs fine step disagreement that marks a kink inside the step
KINK_TOLERANCE = PIPELINE_TOLERANCE / 10


@dataclass
class GradcheckResult:
    op: str
    instances: int
    max_rel_error: float
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ERROR_FLOOR) -> float:
    analytic, numeric = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = STEP, coords=None) -> np.ndarray:
    """Central differences of f() w.r.t. x (modified in place and restored); only `coords` when given"""
    grad = np.zeros_like(x, dtype=np.float64)
    flat, flat_grad = x.reshape(-1), grad.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        original = flat[i]
        flat[i] = original + step
        plus = f()
        flat[i] = original - step
        minus = f()
        flat[i] = original
        flat_grad[i] = (plus - minus) / (2 * step)
    return grad


def _random_conv(rng: np.random.Generator, stride_allowed: bool = True):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = int(rng.integers(3, 7)), int(rng.integers(3, 7))
    out_c = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    params = ConvParams(rng.normal(size=(out_c, c, k, k)), rng.normal(size=out_c),
                        dilation=int(rng.integers(1, 3)),
                        stride=int(rng.integers(1, 3)) if stride_allowed else 1)
    return rng.normal(size=(n, c, h, w)), params


def _check_conv2d(rng, scale: float) -> float:
    x, p = _random_conv(rng)
    grad_y = rng.normal(size=conv2d(x, p).shape)
    grad_x, grad_w, grad_b = conv2d_backward(grad_y, x, p)

    def loss():
        return float(np.sum(conv2d(x, p) * grad_y))

    errors = [relative_error(g * (1 + scale), numeric_gradient(loss, t))
              for g, t in ((grad_x, x), (grad_w, p.weights), (grad_b, p.bias))]
    return max(errors)


def _check_adaptive_conv(rng, scale: float) -> float:
    x, p = _random_conv(rng, stride_allowed=False)
    h, w = x.shape[2:]
    offsets = rng.uniform(-1.5, 1.5, size=(h, w, p.taps, 2))
    grad_y = rng.normal(size=adaptive_conv(x, p, offsets).shape)
    grad_x, grad_w, grad_b = adaptive_conv_backward(grad_y, x, p, offsets)

    def loss():
        return float(np.sum(adaptive_conv(x, p, offsets) * grad_y))

    errors = [relative_error(g * (1 + scale), numeric_gradient(loss, t))
              for g, t in ((grad_x, x), (grad_w, p.weights), (grad_b, p.bias))]
    return max(errors)


def _check_smooth_l1(rng, scale: float) -> float:
    n = int(rng.integers(1, 6))
    pred, target = rng.normal(scale=2.0, size=(n, 4)), rng.normal(scale=2.0, size=(n, 4))
    _, grad = smooth_l1_loss(pred, target)
    return relative_error(grad * (1 + scale), numeric_gradient(lambda: smooth_l1_loss(pred, target)[0], pred))


def _check_iou_loss(rng, scale: float) -> float:
    n = int(rng.integers(1, 6))
    gt = np.column_stack([rng.uniform(10, 50, size=(n, 2)), rng.uniform(4, 20, size=(n, 2))])
    pred = gt.copy()
    pred[:, :2] += rng.uniform(-0.25, 0.25, size=(n, 2)) * gt[:, 2:]
    pred[:, 2:] *= rng.uniform(0.6, 1.5, size=(n, 2))
    _, grad = iou_loss_boxes(pred, gt)
    return relative_error(grad * (1 + scale), numeric_gradient(lambda: float(iou_loss_boxes(pred, gt)[0].sum()), pred))


def _check_bce(rng, scale: float) -> float:
    n = int(rng.integers(1, 9))
    logits = rng.normal(scale=3.0, size=n)
    labels = rng.integers(0, 2, size=n).astype(np.float64)
    _, grad = bce_with_logits(logits, labels)
    return relative_error(grad * (1 + scale),
                          numeric_gradient(lambda: float(bce_with_logits(logits, labels)[0].sum()), logits))


def tiny_pipeline_config() -> PipelineConfig:
    return PipelineConfig(
        num_stages=2,
        levels=(LevelSpec(4, 8),),
        backbone=BackboneSpec(channels=(4, 4), downsample=(2, 2), in_channels=3),
        head_channels=4,
        use_stats=False,
    )


def _pipeline_errors(rng, scale: float) -> Tuple[float, int]:
    """Worst relative error over the sampled parameter coordinates and how many were kink-free"""
    cfg = tiny_pipeline_config()
    model = CascadeModel.initialize(cfg, seed=int(rng.integers(2 ** 31))).astype(np.float64)
    image = rng.uniform(0.0, 1.0, size=(1, 3, 8, 8))

    # one object centered (up to a small jitter) on one of the four anchors
    cx, cy = rng.choice([2.0, 6.0], size=2) + rng.uniform(-0.2, 0.2, size=2)
    gts = np.array([[cx, cy, rng.uniform(4, 8), rng.uniform(4, 8)]])

    first = forward_cascade(image, cfg, model)
    frozen = [None, [o.refined for o in first.stages[0]]]
    sample_seed = int(rng.integers(2 ** 31))

    _, grads, _, _ = compute_loss_and_grads(image, gts, cfg, model, np.random.default_rng(sample_seed), frozen)
    analytic = flatten_grads(grads, model)
    params = model.flat_parameters()

    def loss() -> float:
        current = model.with_parameters(params)
        return compute_loss_and_grads(image, gts, cfg, current, np.random.default_rng(sample_seed), frozen)[0].total

    worst, checked = 0.0, 0
    for _ in range(3 * PIPELINE_COORDS):
        if checked == PIPELINE_COORDS:
            break
        t = int(rng.integers(len(params)))
        i = int(rng.integers(params[t].size))
        coarse = numeric_gradient(loss, params[t], PIPELINE_STEP, coords=[i]).reshape(-1)[i]
        fine = numeric_gradient(loss, params[t], PIPELINE_STEP / 2, coords=[i]).reshape(-1)[i]
        if relative_error(coarse, fine) > KINK_TOLERANCE:
            # a relu or box-overlap kink lies inside the step
            continue
        checked += 1
        worst = max(worst, relative_error(analytic[t].reshape(-1)[i] * (1 + scale), fine))
    return worst, checked


def _check_pipeline(rng, scale: float) -> float:
    worst, checked = _pipeline_errors(rng, scale)
    if checked < PIPELINE_COORDS:
        logger.warning("pipeline gradcheck found only %d of %d kink-free coordinates", checked, PIPELINE_COORDS)
        return float("inf")
    return worst


CHECKS: Dict[str, Tuple[Callable, float]] = {
    "conv2d": (_check_conv2d, OP_TOLERANCE),
    "adaptive_conv": (_check_adaptive_conv, OP_TOLERANCE),
    "smooth_l1": (_check_smooth_l1, OP_TOLERANCE),
    "iou_loss": (_check_iou_loss, OP_TOLERANCE),
    "bce": (_check_bce, OP_TOLERANCE),
    "pipeline": (_check_pipeline, PIPELINE_TOLERANCE),
}


def run_gradcheck(instances: int = 50, perturb: Mapping[str, float] = None, seed: int = 0,
                  ops: Sequence[str] = None) -> List[GradcheckResult]:
    """
    Run every check (or only `ops`) on `instances` random instances.

    `perturb` maps an op name to a relative corruption applied to its
    analytic gradient, so a broken backward pass can be simulated.
    """
    perturb = perturb or {}
    unknown = set(ops or ()) - set(CHECKS)
    if unknown:
        raise ConfigError(f"unknown gradcheck ops: {sorted(unknown)}", "ops")
    results = []
    for offset, (op, (check, tolerance)) in enumerate(CHECKS.items()):
        if ops is not None and op not in ops:
            continue
        rng = np.random.default_rng([seed, offset])
        worst = max(check(rng, perturb.get(op, 0.0)) for _ in range(instances))
        results.append(GradcheckResult(op, instances, worst, worst <= tolerance))
        log = logger.info if worst <= tolerance else logger.error
        log("gradcheck %s: max relative error %.3e over %d instances", op, worst, instances)
    return results
