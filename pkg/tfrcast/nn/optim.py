"""Adam with L2-coupled weight decay and a step learning-rate schedule."""

import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np


@dataclass
class AdamState:
    """
    Moment accumulators and hyperparameters for Adam.

    ``lr`` is rewritten by the training loop from :func:`step_lr` each epoch.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState
) -> Dict[str, np.ndarray]:
    """
    One bias-corrected Adam update.

    Weight decay is added to the gradient as ``weight_decay * theta`` before
    the moment updates (classic L2 coupling).

    Args:
        params: Parameter arrays by name.
        grads: Gradients with the same names and shapes.
        state: Mutable optimizer state; its step counter is advanced.

    Returns:
        New parameter arrays; the inputs are not modified.
    """
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t

    updated = {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(
                f"Gradient for {name} has shape {g.shape}, expected {theta.shape}"
            )
        if state.weight_decay:
            g = g + state.weight_decay * theta
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        updated[name] = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated


def step_lr(epoch: int, base_lr: float, step_size: int, gamma: float) -> float:
    """Learning rate after ``floor(epoch / step_size)`` decays by ``gamma``."""
    if step_size < 1:
        raise ValueError("step_size must be >= 1")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must be in (0, 1]")
    return base_lr * gamma ** math.floor(epoch / step_size)
