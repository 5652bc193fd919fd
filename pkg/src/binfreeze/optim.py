"""SGD with (Nesterov) momentum, no weight decay, constant learning rate."""

from __future__ import annotations

import numpy as np

from .binarize import clamp_latent_
from .errors import ContractError


def sgd_nesterov_step(params, grads, velocity, lr, momentum, nesterov=True):
    """One in-place update of parallel lists of arrays.

    Nesterov:  v <- mu*v - lr*g ;  w <- w + mu*v - lr*g
    Classic:   v <- mu*v - lr*g ;  w <- w + v
    """
    for w, g, v in zip(params, grads, velocity):
        if w.shape != g.shape or w.shape != v.shape:
            raise ContractError(f"shape mismatch: param {w.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v -= lr * g
        if nesterov:
            w += momentum * v - lr * g
        else:
            w += v


class SGD:
    def __init__(self, params, lr=0.1, momentum=0.9, nesterov=True, clamp=()):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.nesterov = nesterov
        self.velocity = {id(p): np.zeros_like(p.data) for p in self.params}
        self._clamp = list(clamp)

    def step(self):
        live = [p for p in self.params if p.grad is not None]
        sgd_nesterov_step([p.data for p in live], [p.grad for p in live],
                          [self.velocity[id(p)] for p in live], self.lr, self.momentum, self.nesterov)
        for w in self._clamp:
            clamp_latent_(w)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def zero_velocity(self, param, where):
        """Drop momentum at entries that just froze."""
        self.velocity[id(param)][where] = 0
