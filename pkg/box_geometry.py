"""
Box geometry: regression transforms, IoU, NMS, anchor grids and the
anchor-derived offset fields that drive adaptive convolution.

Boxes are center format (x, y, w, h) in image pixels. The scalar `Box` /
`Delta` API wraps vectorized helpers over (N, 4) arrays, which is what the
pipeline uses internally.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, ShapeError
from tensor_core import regular_grid

# |dw|, |dh| are clamped to this before exponentiation in decode
DELTA_CLAMP = 4.0


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        values = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"Box coordinates must be finite: {values}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"Box dimensions must be positive: w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> Tuple[float, float, float, float]:
        return (self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "Box":
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class Delta:
    dx: float
    dy: float
    dw: float
    dh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "Delta":
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float


@dataclass
class AnchorLevel:
    """Single-anchor grid of one pyramid level, uniform until regressed; anchors row-major (grid_h*grid_w, 4)"""

    stride: int
    base_size: int
    grid_h: int
    grid_w: int
    anchors: np.ndarray

    @property
    def grid_dims(self) -> Tuple[int, int]:
        return self.grid_h, self.grid_w

    @property
    def boxes(self) -> List[Box]:
        return [Box.from_array(row) for row in self.anchors]

    def __len__(self) -> int:
        return len(self.anchors)


@dataclass
class ProposalSet:
    """Scored boxes of one image, descending score"""

    boxes: np.ndarray
    scores: np.ndarray
    scene_id: int = -1

    def __len__(self) -> int:
        return len(self.scores)

    def scored_boxes(self) -> List[ScoredBox]:
        return [ScoredBox(Box.from_array(b), float(s)) for b, s in zip(self.boxes, self.scores)]

    @classmethod
    def empty(cls, scene_id: int = -1) -> "ProposalSet":
        return cls(np.zeros((0, 4)), np.zeros(0), scene_id)


def as_box_array(boxes: Union[np.ndarray, Sequence[Box]]) -> np.ndarray:
    """Accept an (N, 4) array or a sequence of Box and return an (N, 4) float64 array"""
    if isinstance(boxes, np.ndarray):
        array = boxes.astype(np.float64, copy=False)
    else:
        array = np.array([b.as_array() for b in boxes], dtype=np.float64)
    return array.reshape(-1, 4)


def to_corners(boxes: np.ndarray) -> np.ndarray:
    half = boxes[:, 2:] / 2
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)


def from_corners(corners: np.ndarray) -> np.ndarray:
    size = corners[:, 2:] - corners[:, :2]
    return np.concatenate([corners[:, :2] + size / 2, size], axis=1)


def encode_boxes(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Regression offsets of targets relative to anchors, row-wise"""
    if anchors.shape != targets.shape:
        raise ShapeError("anchors and targets differ", anchors.shape, targets.shape)
    deltas = np.empty_like(anchors, dtype=np.float64)
    deltas[:, 0] = (targets[:, 0] - anchors[:, 0]) / anchors[:, 2]
    deltas[:, 1] = (targets[:, 1] - anchors[:, 1]) / anchors[:, 3]
    deltas[:, 2] = np.log(targets[:, 2] / anchors[:, 2])
    deltas[:, 3] = np.log(targets[:, 3] / anchors[:, 3])
    return deltas


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray, clamp: float = DELTA_CLAMP) -> np.ndarray:
    """Inverse of encode_boxes with the size deltas clamped to [-clamp, clamp]"""
    if anchors.shape != deltas.shape:
        raise ShapeError("anchors and deltas differ", anchors.shape, deltas.shape)
    boxes = np.empty(anchors.shape, dtype=np.float64)
    boxes[:, 0] = deltas[:, 0] * anchors[:, 2] + anchors[:, 0]
    boxes[:, 1] = deltas[:, 1] * anchors[:, 3] + anchors[:, 1]
    boxes[:, 2] = anchors[:, 2] * np.exp(np.clip(deltas[:, 2], -clamp, clamp))
    boxes[:, 3] = anchors[:, 3] * np.exp(np.clip(deltas[:, 3], -clamp, clamp))
    return boxes


def decode_backward(anchors: np.ndarray, deltas: np.ndarray, grad_boxes: np.ndarray,
                    clamp: float = DELTA_CLAMP) -> np.ndarray:
    """Gradient of <grad_boxes, decode_boxes(anchors, deltas)> w.r.t. deltas"""
    grad = np.empty(deltas.shape, dtype=np.float64)
    grad[:, 0] = grad_boxes[:, 0] * anchors[:, 2]
    grad[:, 1] = grad_boxes[:, 1] * anchors[:, 3]
    for col in (2, 3):
        inside = np.abs(deltas[:, col]) < clamp
        size = anchors[:, col] * np.exp(np.clip(deltas[:, col], -clamp, clamp))
        grad[:, col] = grad_boxes[:, col] * size * inside
    return grad


def encode(anchor: Box, target: Box) -> Delta:
    return Delta.from_array(encode_boxes(anchor.as_array()[None], target.as_array()[None])[0])


def decode(anchor: Box, delta: Delta) -> Box:
    return Box.from_array(decode_boxes(anchor.as_array()[None], delta.as_array()[None])[0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) center-format boxes -> (N, M)"""
    ca, cb = to_corners(a), to_corners(b)
    inter_w = np.clip(np.minimum(ca[:, None, 2], cb[None, :, 2]) - np.maximum(ca[:, None, 0], cb[None, :, 0]), 0, None)
    inter_h = np.clip(np.minimum(ca[:, None, 3], cb[None, :, 3]) - np.maximum(ca[:, None, 1], cb[None, :, 1]), 0, None)
    inter = inter_w * inter_h
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def paired_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two (N, 4) arrays"""
    if a.shape != b.shape:
        raise ShapeError("paired boxes differ", a.shape, b.shape)
    ca, cb = to_corners(a), to_corners(b)
    inter_w = np.clip(np.minimum(ca[:, 2], cb[:, 2]) - np.maximum(ca[:, 0], cb[:, 0]), 0, None)
    inter_h = np.clip(np.minimum(ca[:, 3], cb[:, 3]) - np.maximum(ca[:, 1], cb[:, 1]), 0, None)
    inter = inter_w * inter_h
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a: Box, b: Box) -> float:
    return float(iou_matrix(a.as_array()[None], b.as_array()[None])[0, 0])


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score, ties to the lower index"""
    if not 0.0 < iou_threshold < 1.0:
        raise ConfigError(f"NMS threshold must be in (0, 1), got {iou_threshold}", "nms_threshold")
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)

    order = np.argsort(-np.asarray(scores), kind="stable")
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(i)
        overlaps = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][overlaps <= iou_threshold]
    return np.array(keep, dtype=np.int64)


def nms(candidates: Sequence[ScoredBox], iou_threshold: float) -> List[ScoredBox]:
    boxes = as_box_array([c.box for c in candidates])
    scores = np.array([c.score for c in candidates], dtype=np.float64)
    return [candidates[i] for i in nms_indices(boxes, scores, iou_threshold)]


def clip_boxes(boxes: np.ndarray, image_w: int, image_h: int) -> np.ndarray:
    """Clip center-format boxes to the image; fully outside boxes collapse to zero size"""
    corners = to_corners(boxes)
    corners[:, [0, 2]] = np.clip(corners[:, [0, 2]], 0, image_w)
    corners[:, [1, 3]] = np.clip(corners[:, [1, 3]], 0, image_h)
    return from_corners(corners)


def build_anchor_level(image_w: int, image_h: int, stride: int, base_size: int) -> AnchorLevel:
    """Square anchors of side base_size centered at ((j+1/2)s, (i+1/2)s)"""
    if stride <= 0 or base_size <= 0:
        raise ConfigError(f"stride and base size must be positive, got {stride}, {base_size}", "levels")
    grid_h, grid_w = image_h // stride, image_w // stride
    if grid_h == 0 or grid_w == 0:
        raise ConfigError(f"stride {stride} leaves no grid cells on a {image_w}x{image_h} image", "levels")

    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    anchors = np.stack([
        (cols.ravel() + 0.5) * stride,
        (rows.ravel() + 0.5) * stride,
        np.full(grid_h * grid_w, float(base_size)),
        np.full(grid_h * grid_w, float(base_size)),
    ], axis=1)
    return AnchorLevel(stride, base_size, grid_h, grid_w, anchors)


def project_anchors(anchors: np.ndarray, stride: int) -> np.ndarray:
    """Anchor boxes in feature-map units; an unregressed anchor lands on its own cell"""
    projected = anchors / float(stride)
    projected[:, :2] -= 0.5
    return projected


def anchor_offsets(anchors: Union[AnchorLevel, np.ndarray], kernel: Tuple[int, int], stride: int,
                   dilation: int = 1, grid_shape: Tuple[int, int] = None) -> np.ndarray:
    """
    Offset field (h, w, K, 2) aligning the kernel taps of every location to its anchor.

    Taps land at the projected anchor center plus a uniform kh x kw grid spanning
    the projected anchor (corners at +-w/2, +-h/2). Offsets are stored relative to
    the regular grid of `dilation`, so that adaptive_conv at that dilation samples
    exactly the anchor-aligned taps.
    """
    if isinstance(anchors, AnchorLevel):
        grid_shape = anchors.grid_dims
        anchors = anchors.anchors
    if grid_shape is None:
        raise ShapeError("grid_shape is required for raw anchor arrays", "(h, w)", None)
    kh, kw = kernel
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel taps must be odd, got {kh}x{kw}", "kernel")
    gh, gw = grid_shape
    if anchors.shape != (gh * gw, 4):
        raise ShapeError("anchor count does not match grid", (gh * gw, 4), anchors.shape)

    projected = project_anchors(anchors.astype(np.float64), stride)
    iy, ix = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    ctr_dy = projected[:, 1] - iy.ravel()
    ctr_dx = projected[:, 0] - ix.ravel()

    fy = np.linspace(-0.5, 0.5, kh) if kh > 1 else np.zeros(1)
    fx = np.linspace(-0.5, 0.5, kw) if kw > 1 else np.zeros(1)
    tap_fy, tap_fx = np.meshgrid(fy, fx, indexing="ij")
    shp_dy = projected[:, 3:4] * tap_fy.ravel()[None, :]
    shp_dx = projected[:, 2:3] * tap_fx.ravel()[None, :]

    grid = regular_grid(kh, kw, dilation)
    offsets = np.empty((gh * gw, kh * kw, 2), dtype=np.float64)
    offsets[..., 0] = ctr_dy[:, None] + shp_dy - grid[None, :, 0]
    offsets[..., 1] = ctr_dx[:, None] + shp_dx - grid[None, :, 1]
    return offsets.reshape(gh, gw, kh * kw, 2)
