#!/usr/bin/env python3
"""
Tests for the finite-difference gradient checks
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import gradcheck
from errors import ConfigError
from gradcheck import (
    CHECKS,
    OP_TOLERANCE,
    PIPELINE_COORDS,
    PIPELINE_TOLERANCE,
    numeric_gradient,
    relative_error,
    run_gradcheck,
)


def test_relative_error_uses_floor():
    assert relative_error(np.array([1.0]), np.array([1.0])) == 0.0
    assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)
    assert relative_error(np.array([1e-6]), np.array([0.0])) == pytest.approx(1e-3)


def test_numeric_gradient_of_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    grad = numeric_gradient(lambda: float(np.sum(x ** 2)), x)
    np.testing.assert_allclose(grad, 2 * x, rtol=1e-6)
    np.testing.assert_array_equal(x, [1.0, -2.0, 3.0])


def test_numeric_gradient_selected_coordinates():
    x = np.array([1.0, 2.0, 3.0])
    grad = numeric_gradient(lambda: float(np.sum(x ** 2)), x, coords=[1])
    assert grad[0] == 0.0 and grad[2] == 0.0
    assert grad[1] == pytest.approx(4.0)


CHEAP_OPS = [op for op in CHECKS if op != "pipeline"]


def test_cheap_ops_pass_on_fifty_instances():
    results = run_gradcheck(instances=50, ops=CHEAP_OPS)
    assert [r.op for r in results] == CHEAP_OPS
    for r in results:
        assert r.passed, f"{r.op}: {r.max_rel_error}"
        assert r.instances == 50


def test_pipeline_passes():
    (result,) = run_gradcheck(instances=5, ops=["pipeline"])
    assert result.passed, result.max_rel_error


@pytest.mark.skipif(os.getenv('CRPN_RUN_SLOW', 'false').lower() != 'true',
                    reason="fifty end-to-end pipeline instances take minutes; set CRPN_RUN_SLOW=true")
def test_pipeline_passes_on_fifty_instances():
    (result,) = run_gradcheck(instances=50, ops=["pipeline"])
    assert result.passed, result.max_rel_error


def test_pipeline_checks_every_sampled_coordinate():
    worst, checked = gradcheck._pipeline_errors(np.random.default_rng(4), 0.0)
    assert checked == PIPELINE_COORDS
    assert worst <= PIPELINE_TOLERANCE


def test_pipeline_fails_when_every_coordinate_is_skipped(monkeypatch):
    monkeypatch.setattr(gradcheck, "KINK_TOLERANCE", -1.0)
    (result,) = run_gradcheck(instances=1, ops=["pipeline"])
    assert not result.passed
    assert result.max_rel_error == float("inf")


def test_unknown_op_is_rejected():
    with pytest.raises(ConfigError):
        run_gradcheck(instances=1, ops=["softmax"])


@pytest.mark.parametrize("op", ["conv2d", "adaptive_conv", "bce"])
def test_corrupted_gradient_is_detected(op):
    results = {r.op: r for r in run_gradcheck(instances=3, perturb={op: 0.01})}
    assert not results[op].passed
    assert results[op].max_rel_error > OP_TOLERANCE
    assert all(r.passed for name, r in results.items() if name != op)


def test_results_are_deterministic():
    first = run_gradcheck(instances=2)
    second = run_gradcheck(instances=2)
    assert [r.max_rel_error for r in first] == [r.max_rel_error for r in second]
