"""Bias-corrected Adam over a ParamStore."""

from __future__ import annotations

import logging

import numpy as np

from .params import ParamStore

log = logging.getLogger(__name__)


class Adam:
    """Adam with per-parameter moment buffers that persist across steps.

    Deterministic given identical state, gradients and hyperparameters.
    A step before any backward has populated gradients is a warned no-op.
    """

    def __init__(self, store: ParamStore, lr: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self) -> bool:
        """Apply one update from accumulated grads; False if none exist."""
        if all(t.grad is None for _, t in self.store.items()):
            log.warning("adam step skipped: no gradients accumulated")
            return False
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, t in self.store.items():
            g = t.grad
            if g is None:
                g = np.zeros_like(t.data)
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(t.data)
                self._v[name] = np.zeros_like(t.data)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return True
