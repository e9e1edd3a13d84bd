"""SGD with momentum/damping and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Iterable

from .autodiff import Parameter


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0,
             damping: float = 0.0, weight_decay: float = 0.0) -> None:
    """One in-place update: g <- grad + wd*p; buf <- mom*buf + (1-damping)*g; p <- p - lr*buf.

    Frozen parameters (trainable=False) and parameters without gradients
    are left untouched, momentum buffers included.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative, got %r" % lr)
    if momentum < 0 or damping < 0 or weight_decay < 0:
        raise ValueError("momentum, damping and weight decay must be non-negative")
    for p in params:
        if not p.trainable or p.grad is None:
            continue
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        p.momentum *= momentum
        p.momentum += (1.0 - damping) * g
        p.data -= lr * p.momentum


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * 0.5 * (1 + cos(pi * step / total_steps)), decaying to 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step < 0 or step > total_steps:
        raise ValueError("step %d outside [0, %d]" % (step, total_steps))
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
