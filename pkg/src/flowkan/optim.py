"""AdamW with decoupled weight decay, and an EMA shadow of the parameters."""

from __future__ import annotations

import numpy as np


class AdamW:
    """Standard AdamW with bias correction.

    `params` is a list of (name, DiffTensor); moment buffers are keyed by
    name and shape-match their parameters.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-6):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1 - b1**self.step_count
        bc2 = 1 - b2**self.step_count
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m[...] = b1 * m + (1 - b1) * g
            v[...] = b2 * v + (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


class EmaState:
    """Exponential moving average: shadow <- decay*shadow + (1-decay)*param.

    `shadow` maps parameter name to array. When `targets` tensors are
    supplied, updates are written into their data in place, so a teacher
    network built on those tensors always sees the current average.
    """

    def __init__(self, params, decay, targets=None):
        if not 0 <= decay < 1:
            raise ValueError(f"EMA decay must be in [0,1), got {decay}")
        self.decay = decay
        self._params = list(params)
        if targets is None:
            self.shadow = {name: t.data.copy() for name, t in self._params}
        else:
            self.shadow = {}
            for (name, src), (tname, dst) in zip(self._params, targets):
                if tname != name or dst.data.shape != src.data.shape:
                    raise ValueError(f"EMA target mismatch for {name!r}")
                dst.data[...] = src.data
                self.shadow[name] = dst.data

    def update(self):
        d = self.decay
        for name, p in self._params:
            s = self.shadow[name]
            if s.shape != p.data.shape:
                raise ValueError(f"EMA shadow shape mismatch for {name!r}")
            s[...] = d * s + (1 - d) * p.data
