#!/usr/bin/env python3
"""
Tests for box transforms, IoU, NMS, anchor grids and anchor offset fields
"""

import math
import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from box_geometry import (
    DELTA_CLAMP,
    AnchorLevel,
    Box,
    Delta,
    ScoredBox,
    anchor_offsets,
    build_anchor_level,
    clip_boxes,
    decode,
    decode_backward,
    decode_boxes,
    encode,
    encode_boxes,
    iou,
    iou_matrix,
    nms,
    nms_indices,
    paired_iou,
    project_anchors,
)
from errors import ConfigError, ShapeError
from tensor_core import regular_grid


@pytest.fixture
def rng():
    return np.random.default_rng(99)


def random_boxes(rng, n, low=0.0, high=50.0):
    return np.column_stack([rng.uniform(low, high, size=(n, 2)), rng.uniform(1.0, 20.0, size=(n, 2))])


def iou_oracle(a, b):
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def nms_oracle(boxes, scores, thr):
    """O(n^2) greedy suppression with the same tie rule (lower index first)"""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    suppressed = set()
    keep = []
    for pos, i in enumerate(order):
        if i in suppressed:
            continue
        keep.append(i)
        for j in order[pos + 1:]:
            if iou_oracle(boxes[i], boxes[j]) > thr:
                suppressed.add(j)
    return keep


def test_box_rejects_invalid_dimensions():
    with pytest.raises(ValueError):
        Box(0, 0, 0, 1)
    with pytest.raises(ValueError):
        Box(0, 0, 1, float("nan"))


def test_encode_identity_is_zero():
    assert encode(Box(3, 4, 5, 6), Box(3, 4, 5, 6)) == Delta(0.0, 0.0, 0.0, 0.0)


def test_encode_hand_example():
    d = encode(Box(0, 0, 2, 2), Box(1, 1, 4, 4))
    assert d.dx == pytest.approx(0.5)
    assert d.dy == pytest.approx(0.5)
    assert d.dw == pytest.approx(math.log(2))
    assert d.dh == pytest.approx(math.log(2))


def test_decode_hand_example_and_zero_delta():
    anchor = Box(0, 0, 2, 2)
    assert decode(anchor, Delta(0, 0, 0, 0)) == anchor
    box = decode(anchor, Delta(0.5, 0.5, math.log(2), math.log(2)))
    np.testing.assert_allclose(box.as_array(), [1, 1, 4, 4])


def test_decode_clamps_size_deltas():
    box = decode(Box(0, 0, 3, 2), Delta(0, 0, 100.0, -100.0))
    assert box.w == pytest.approx(3 * math.exp(DELTA_CLAMP))
    assert box.h == pytest.approx(2 * math.exp(-DELTA_CLAMP))


def test_encode_decode_round_trip(rng):
    anchors, targets = random_boxes(rng, 200), random_boxes(rng, 200)
    np.testing.assert_allclose(decode_boxes(anchors, encode_boxes(anchors, targets)), targets, atol=1e-6)


def test_decode_backward_matches_finite_differences(rng):
    anchors = random_boxes(rng, 5)
    deltas = rng.normal(scale=0.5, size=(5, 4))
    grad_boxes = rng.normal(size=(5, 4))
    analytic = decode_backward(anchors, deltas, grad_boxes)
    eps = 1e-6
    for i in range(5):
        for j in range(4):
            plus, minus = deltas.copy(), deltas.copy()
            plus[i, j] += eps
            minus[i, j] -= eps
            numeric = np.sum((decode_boxes(anchors, plus) - decode_boxes(anchors, minus)) * grad_boxes) / (2 * eps)
            assert analytic[i, j] == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_decode_backward_is_zero_where_clamped():
    anchors = np.array([[0.0, 0.0, 2.0, 2.0]])
    grad = decode_backward(anchors, np.array([[0.0, 0.0, 10.0, 0.0]]), np.ones((1, 4)))
    assert grad[0, 2] == 0.0
    assert grad[0, 3] != 0.0


def test_iou_examples():
    assert iou(Box(5, 5, 4, 4), Box(5, 5, 4, 4)) == pytest.approx(1.0)
    assert iou(Box(0, 0, 1, 1), Box(10, 10, 1, 1)) == 0.0
    assert iou(Box(0, 0, 1, 1), Box(0.5, 0, 1, 1)) == pytest.approx(1 / 3)


def test_iou_is_symmetric_with_unit_self_overlap(rng):
    a, b = random_boxes(rng, 30), random_boxes(rng, 25)
    np.testing.assert_array_equal(iou_matrix(a, b), iou_matrix(b, a).T)
    np.testing.assert_allclose(np.diag(iou_matrix(a, a)), 1.0)
    for x, y in zip(a[:10], b[:10]):
        assert iou(Box.from_array(x), Box.from_array(y)) == iou(Box.from_array(y), Box.from_array(x))


def test_iou_grows_with_intersection_on_nested_boxes():
    gt = np.array([[20.0, 20.0, 12.0, 8.0]])
    scales = np.linspace(0.1, 1.0, 10)
    inner = np.column_stack([np.full(10, 20.0), np.full(10, 20.0), 12.0 * scales, 8.0 * scales])
    overlaps = iou_matrix(inner, gt)[:, 0]
    assert np.all(np.diff(overlaps) > 0)
    assert overlaps[-1] == pytest.approx(1.0)

    # a box growing inside a larger one: intersection and IoU rise together
    outer = np.array([[20.0, 20.0, 30.0, 30.0]])
    growing = np.column_stack([np.full(10, 18.0), np.full(10, 21.0), 4.0 + 2.0 * np.arange(10), np.full(10, 6.0)])
    assert np.all(np.diff(iou_matrix(growing, outer)[:, 0]) > 0)


def test_iou_matrix_matches_oracle(rng):
    a, b = random_boxes(rng, 12), random_boxes(rng, 9)
    expected = np.array([[iou_oracle(x, y) for y in b] for x in a])
    np.testing.assert_allclose(iou_matrix(a, b), expected, atol=1e-12)
    np.testing.assert_allclose(paired_iou(a[:9], b), np.diag(expected[:9]), atol=1e-12)
    with pytest.raises(ShapeError):
        paired_iou(a, b)


def test_nms_single_and_identical_boxes():
    only = ScoredBox(Box(1, 1, 2, 2), 0.3)
    assert nms([only], 0.5) == [only]
    kept = nms([ScoredBox(Box(5, 5, 4, 4), 0.8), ScoredBox(Box(5, 5, 4, 4), 0.9)], 0.8)
    assert kept == [ScoredBox(Box(5, 5, 4, 4), 0.9)]


def test_nms_matches_bruteforce_oracle(rng):
    for _ in range(20):
        boxes = random_boxes(rng, 50, high=30.0)
        scores = rng.integers(0, 10, size=50) / 10.0
        kept = nms_indices(boxes, scores, 0.5)
        assert list(kept) == nms_oracle(boxes, scores, 0.5)
        survivors = boxes[kept]
        overlaps = iou_matrix(survivors, survivors)
        np.fill_diagonal(overlaps, 0.0)
        assert np.all(overlaps <= 0.5)


@pytest.mark.parametrize("threshold", [0.3, 0.7])
def test_nms_matches_bruteforce_oracle_on_200_boxes(rng, threshold):
    for _ in range(3):
        boxes = random_boxes(rng, 200, high=60.0)
        scores = rng.integers(0, 20, size=200) / 20.0
        kept = nms_indices(boxes, scores, threshold)
        assert list(kept) == nms_oracle(boxes, scores, threshold)
        survivors = boxes[kept]
        overlaps = iou_matrix(survivors, survivors)
        np.fill_diagonal(overlaps, 0.0)
        assert np.all(overlaps <= threshold)


def test_nms_rejects_threshold_outside_unit_interval():
    with pytest.raises(ConfigError):
        nms_indices(np.zeros((0, 4)), np.zeros(0), 1.0)


def test_clip_boxes_keeps_boxes_inside():
    clipped = clip_boxes(np.array([[-2.0, 5.0, 8.0, 4.0], [30.0, 30.0, 10.0, 10.0]]), 32, 32)
    np.testing.assert_allclose(clipped[0], [1.0, 5.0, 2.0, 4.0])
    np.testing.assert_allclose(clipped[1], [28.5, 28.5, 7.0, 7.0])


def test_build_anchor_level_examples():
    one = build_anchor_level(8, 8, 8, 8)
    assert one.grid_dims == (1, 1)
    np.testing.assert_array_equal(one.anchors, [[4.0, 4.0, 8.0, 8.0]])

    four = build_anchor_level(16, 16, 8, 8)
    assert four.grid_dims == (2, 2)
    assert sorted(set(four.anchors[:, 0])) == [4.0, 12.0]
    assert sorted(set(four.anchors[:, 1])) == [4.0, 12.0]
    # row-major: x varies fastest
    np.testing.assert_array_equal(four.anchors[:2, :2], [[4.0, 4.0], [12.0, 4.0]])

    with pytest.raises(ConfigError):
        build_anchor_level(8, 8, 16, 8)


def test_projection_puts_unregressed_anchor_on_its_cell():
    level = build_anchor_level(32, 32, 4, 16)
    projected = project_anchors(level.anchors, 4)
    rows, cols = np.divmod(np.arange(len(level)), level.grid_w)
    np.testing.assert_array_equal(projected[:, 0], cols)
    np.testing.assert_array_equal(projected[:, 1], rows)
    assert np.all(projected[:, 2:] == 4.0)


def test_unregressed_offsets_reproduce_dilated_grid():
    # projected size 4 = 2 * dilation 2
    for stride, base in ((4, 16), (8, 32)):
        level = build_anchor_level(64, 64, stride, base)
        np.testing.assert_array_equal(anchor_offsets(level, (3, 3), stride, dilation=2), 0.0)
        relative_to_unit = anchor_offsets(level, (3, 3), stride)
        expected = regular_grid(3, 3, 2) - regular_grid(3, 3, 1)
        np.testing.assert_array_equal(relative_to_unit, np.broadcast_to(expected, relative_to_unit.shape))


def test_offsets_translate_with_anchor():
    level = build_anchor_level(32, 32, 4, 16)
    shifted = level.anchors.copy()
    shifted[:, 0] += 4.0  # one feature unit
    base = anchor_offsets(level, (3, 3), 4)
    moved = anchor_offsets(shifted, (3, 3), 4, grid_shape=level.grid_dims)
    np.testing.assert_allclose(moved[..., 1] - base[..., 1], 1.0)
    np.testing.assert_allclose(moved[..., 0], base[..., 0])


def test_offsets_hand_example_taps():
    # projected anchor (p_x, p_y, 4, 2) at cell (1, 1) of a 3x3 grid with stride 1
    anchors = np.zeros((9, 4))
    anchors[:, 0] = [0.5, 1.5, 2.5] * 3
    anchors[:, 1] = np.repeat([0.5, 1.5, 2.5], 3)
    anchors[:, 2], anchors[:, 3] = 4.0, 2.0
    level = AnchorLevel(1, 4, 3, 3, anchors)
    offsets = anchor_offsets(level, (3, 3), 1)
    taps = regular_grid(3, 3, 1) + offsets[1, 1]
    dy, dx = sorted(set(taps[:, 0])), sorted(set(taps[:, 1]))
    assert dx == [-2.0, 0.0, 2.0]
    assert dy == [-1.0, 0.0, 1.0]


def test_offsets_reject_even_kernel_and_wrong_count():
    level = build_anchor_level(16, 16, 4, 8)
    with pytest.raises(ConfigError):
        anchor_offsets(level, (2, 2), 4)
    with pytest.raises(ShapeError):
        anchor_offsets(level.anchors[:3], (3, 3), 4, grid_shape=level.grid_dims)
