"""Adam with weight decay and the cosine-annealing learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .config import TrainConfig


def cosine_lr(epoch: float, config: TrainConfig) -> float:
    """Annealed rate; epochs past ``t_max`` stay at ``eta_min``."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    if epoch >= config.t_max:
        return config.eta_min
    return config.eta_min + 0.5 * (config.lr - config.eta_min) * (1.0 + math.cos(math.pi * epoch / config.t_max))


def adam_step(param, grad, m, v, step: int, lr: float, config: TrainConfig):
    """One bias-corrected Adam update; returns new ``(param, m, v)``.

    With ``config.decoupled_wd`` the decay shrinks the weights directly
    (``param -= lr * wd * param``); otherwise it is added to the gradient.
    """
    param, grad = np.asarray(param, dtype=np.float64), np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or m.shape != param.shape or v.shape != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, m {m.shape}, v {v.shape}")
    if step < 1:
        raise ValueError("Adam steps are counted from 1")
    wd = config.weight_decay
    if not config.decoupled_wd and wd:
        grad = grad + wd * param
    m = config.beta1 * m + (1.0 - config.beta1) * grad
    v = config.beta2 * v + (1.0 - config.beta2) * grad * grad
    m_hat = m / (1.0 - config.beta1**step)
    v_hat = v / (1.0 - config.beta2**step)
    update = lr * m_hat / (np.sqrt(v_hat) + config.eps)
    if config.decoupled_wd and wd:
        update = update + lr * wd * param
    return param - update, m, v


class Adam:
    """Moment buffers for a named set of arrays."""

    def __init__(self, shapes: dict[str, tuple[int, ...]], config: TrainConfig):
        self.config = config
        self.step = 0
        self.m = {name: np.zeros(shape) for name, shape in shapes.items()}
        self.v = {name: np.zeros(shape) for name, shape in shapes.items()}

    def apply(self, params: dict, grads: dict[str, np.ndarray], lr: float) -> None:
        """Update ``params`` (name -> DiffArray) in place, in name order."""
        self.step += 1
        for name, arr in params.items():
            arr.value, self.m[name], self.v[name] = adam_step(
                arr.value, grads[name], self.m[name], self.v[name], self.step, lr, self.config
            )
