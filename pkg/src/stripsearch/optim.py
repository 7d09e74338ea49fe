"""AdamW with a cosine learning-rate schedule, shared by both toy models."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["TrainConfig", "cosine_lr", "AdamW"]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    lr_min: float = 1e-5
    epochs: int = 2
    batch_size: int = 32
    temperature: float = 0.05
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.lr_min > self.learning_rate:
            raise ValueError("lr_min must not exceed learning_rate")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay hitting ``lr_max`` at step 0 and ``lr_min`` at the last step."""
    if total_steps <= 1:
        return lr_max
    progress = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled-weight-decay Adam over one parameter array.

    Gradients may be given for a subset of columns (``cols``); the moment
    decay and parameter update still run over the whole array, so the
    result equals a dense step with zeros outside ``cols``.
    """

    def __init__(self, shape: tuple[int, ...], cfg: TrainConfig):
        self.cfg = cfg
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray, lr: float, cols: np.ndarray | None = None) -> None:
        cfg = self.cfg
        self.t += 1
        self.m *= cfg.beta1
        self.v *= cfg.beta2
        if cols is None:
            self.m += (1.0 - cfg.beta1) * grad
            self.v += (1.0 - cfg.beta2) * grad * grad
        else:
            self.m[..., cols] += (1.0 - cfg.beta1) * grad
            self.v[..., cols] += (1.0 - cfg.beta2) * grad * grad
        m_hat_scale = 1.0 / (1.0 - cfg.beta1**self.t)
        v_hat_scale = 1.0 / (1.0 - cfg.beta2**self.t)
        if cfg.weight_decay:
            param *= 1.0 - lr * cfg.weight_decay
        param -= lr * (self.m * m_hat_scale) / (np.sqrt(self.v * v_hat_scale) + cfg.eps)
