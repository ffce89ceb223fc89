"""Adaptive moment estimation with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class AdamW:
    """Standard AdamW over a named parameter dict.

    Weight decay is decoupled (applied directly to the weights, not mixed
    into the moment estimates). Biases and layernorm parameters are
    excluded from decay by name suffix.
    """

    NO_DECAY_SUFFIXES = (".beta", ".gamma", "_bias", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo")

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()}
        self._v = {k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and not name.endswith(self.NO_DECAY_SUFFIXES):
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype)
