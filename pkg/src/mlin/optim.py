"""Adamax with linear warmup, a one-shot learning-rate drop, and global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class Schedule:
    base_lr: float = 0.005
    warmup_steps: int = 1000
    decay_lr: float = 0.0005
    decay_epoch: int = 7

    def lr(self, step: int, epoch: int) -> float:
        """Rate for the ``step``-th update (1-based) taken during ``epoch`` (0-based).

        Ramps linearly to ``base_lr`` over ``warmup_steps`` updates, then holds;
        from ``decay_epoch`` on the rate is fixed at ``decay_lr``.
        """
        if epoch >= self.decay_epoch:
            return self.decay_lr
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        return self.base_lr


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float = 0.25) -> tuple[list[np.ndarray], float]:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``.

    Returns the (possibly scaled) gradients and the norm before clipping.
    """
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        return [g * factor for g in grads], norm
    return list(grads), norm


class Adamax:
    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.u = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step_size = lr / (1.0 - b1 ** self.t)
        for p, g, m, u in zip(self.params, grads, self.m, self.u):
            m *= b1
            m += (1.0 - b1) * g
            np.maximum(b2 * u, np.abs(g), out=u)
            p.data -= step_size * m / (u + self.eps)
