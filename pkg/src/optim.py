"""
Photometric loss and the Adam optimizer.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from src.config import OptimConfig
from src.errors import EmptyBatch, ShapeMismatch


def mse_loss(pred, gt) -> tuple[float, np.ndarray]:
    """
    Mean over rays of the squared L2 color error.

    Returns:
        (loss, dL/dpred)
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and target {gt.shape} differ")
    rays = pred.shape[0]
    if rays == 0:
        raise EmptyBatch("loss over an empty ray batch")
    diff = pred - gt
    return float(np.sum(diff * diff) / rays), 2.0 * diff / rays


def psnr_from_mse(mse_per_channel: float) -> float:
    if mse_per_channel <= 0:
        return 99.0
    return float(min(99.0, -10.0 * math.log10(mse_per_channel)))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p) for name, p in params.items()},
            v={name: np.zeros_like(p) for name, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """
    Bias-corrected Adam, updating params and state in place.

    Every moment decays every step, including table rows the batch never
    touched.
    """
    if set(params) != set(grads) or set(params) != set(state.m):
        missing = set(params) ^ set(grads) | set(params) ^ set(state.m)
        raise ShapeMismatch(f"parameter, gradient and moment names differ: {sorted(missing)[:5]}")
    for name, p in params.items():
        if not p.shape == grads[name].shape == state.m[name].shape == state.v[name].shape:
            raise ShapeMismatch(
                f"{name}: param {p.shape}, grad {grads[name].shape}, moment {state.m[name].shape}"
            )
    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / correction1) / (np.sqrt(v / correction2) + eps)).astype(p.dtype)
    return state


def learning_rate_at(step: int, config: OptimConfig) -> float:
    if config.lr_schedule == "cosine" and config.iterations > 0:
        progress = min(step / config.iterations, 1.0)
        return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))
    return config.learning_rate


class Adam:
    """Adam over a named parameter dict, following the run's schedule."""

    def __init__(self, params: dict[str, np.ndarray], config: OptimConfig, state: Optional[AdamState] = None):
        self.params = params
        self.config = config
        self.state = state or AdamState.zeros_like(params)

    @property
    def step_count(self) -> int:
        return self.state.step

    def step(self, grads: dict[str, np.ndarray]) -> float:
        lr = learning_rate_at(self.state.step, self.config)
        adam_step(
            self.params,
            grads,
            self.state,
            lr,
            (self.config.beta1, self.config.beta2),
            self.config.eps,
        )
        return lr
