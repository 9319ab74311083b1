"""SGD with momentum and L2 weight decay."""

from __future__ import annotations

import numpy as np

from .autograd import DTYPE, NonFiniteError, Tensor


def sgd_step(params, grads, velocities, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
    """In-place update: ``v = momentum*v + g + wd*p``; ``p -= lr*v``.

    ``params``, ``grads`` and ``velocities`` are parallel lists of arrays.
    Raises :class:`NonFiniteError` before touching anything if a gradient is
    not finite.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for i, g in enumerate(grads):
        if g is None:
            raise ValueError(f"parameter {i} received no gradient")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {i}")
    lr, momentum, weight_decay = DTYPE(lr), DTYPE(momentum), DTYPE(weight_decay)
    for p, g, v in zip(params, grads, velocities):
        step = g + weight_decay * p if weight_decay else g
        v *= momentum
        v += step
        p -= lr * v
    return params


class SGD:
    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.velocities,
            self.lr,
            self.momentum,
            self.weight_decay,
        )
