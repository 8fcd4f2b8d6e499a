"""
Tests for the photometric loss and Adam.
"""

import numpy as np
import pytest

from src.config import OptimConfig
from src.errors import EmptyBatch, ShapeMismatch
from src.optim import Adam, AdamState, adam_step, learning_rate_at, mse_loss, psnr_from_mse


def test_mse_loss_and_gradient():
    """Test the mean over rays of the squared color error."""
    pred = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    gt = np.zeros((2, 3))
    loss, grad = mse_loss(pred, gt)
    assert loss == pytest.approx(0.5)
    np.testing.assert_allclose(grad, [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


def test_mse_loss_errors():
    """Test empty batches and mismatched shapes raise."""
    with pytest.raises(EmptyBatch):
        mse_loss(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ShapeMismatch):
        mse_loss(np.zeros((2, 3)), np.zeros((3, 3)))


def test_psnr_from_mse():
    """Test the decibel conversion and its cap."""
    assert psnr_from_mse(0.01) == pytest.approx(20.0)
    assert psnr_from_mse(0.0) == 99.0


def test_adam_first_step_moves_by_lr():
    """Test the bias-corrected first step is lr * sign(g)."""
    params = {"w": np.array([1.0, -1.0, 0.5])}
    state = AdamState.zeros_like(params)
    adam_step(params, {"w": np.array([0.3, -2.0, 0.0])}, state, lr=0.1)
    np.testing.assert_allclose(params["w"], [0.9, -0.9, 0.5], atol=1e-6)
    assert state.step == 1


def test_adam_decays_untouched_moments():
    """Test moments decay every step even with zero gradient."""
    params = {"w": np.zeros(2)}
    state = AdamState.zeros_like(params)
    adam_step(params, {"w": np.array([1.0, 0.0])}, state, lr=0.1)
    first = state.m["w"].copy()
    adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_allclose(state.m["w"], 0.9 * first)


def test_adam_rejects_mismatched_names_and_shapes():
    """Test name and shape validation."""
    params = {"w": np.zeros(2)}
    state = AdamState.zeros_like(params)
    with pytest.raises(ShapeMismatch):
        adam_step(params, {"v": np.zeros(2)}, state, lr=0.1)
    with pytest.raises(ShapeMismatch):
        adam_step(params, {"w": np.zeros(3)}, state, lr=0.1)


def test_adam_minimizes_quadratic():
    """Test Adam converges on a simple bowl."""
    params = {"w": np.array([3.0, -2.0])}
    optimizer = Adam(params, OptimConfig(learning_rate=0.05, iterations=2000))
    for _ in range(2000):
        optimizer.step({"w": 2.0 * params["w"]})
    assert np.all(np.abs(params["w"]) < 0.05)
    assert optimizer.step_count == 2000


def test_learning_rate_schedules():
    """Test constant and cosine schedules."""
    constant = OptimConfig(learning_rate=0.01, iterations=100)
    assert learning_rate_at(50, constant) == 0.01
    cosine = OptimConfig(learning_rate=0.01, iterations=100, lr_schedule="cosine")
    assert learning_rate_at(0, cosine) == pytest.approx(0.01)
    assert learning_rate_at(50, cosine) == pytest.approx(0.005)
    assert learning_rate_at(100, cosine) == pytest.approx(0.0, abs=1e-12)
