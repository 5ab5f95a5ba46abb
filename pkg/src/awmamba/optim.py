"""Adaptive optimizer with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter


class AdamW:
    """Moment-tracked update with weight decay applied outside the gradient.

    Each step performs, per parameter p with gradient g:
        m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
        p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
    where m_hat, v_hat carry the usual bias correction.
    """

    MAX_STEPS = 2**53  # float64 loses integer exactness past this

    def __init__(self, named_params, lr: float = 1e-4, weight_decay: float = 5e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params: list[tuple[str, Parameter]] = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def step(self) -> None:
        if self.step_count >= self.MAX_STEPS:
            raise OverflowError("AdamW: step counter overflow")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                raise ValueError(f"AdamW: parameter {name!r} has no gradient")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            upd = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                upd = upd + (self.lr * self.weight_decay) * p.data
            p.data = (p.data - upd).astype(p.data.dtype, copy=False)
