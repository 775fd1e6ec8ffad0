"""Adam, as a pure step function plus a small stateful wrapper."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor

DEFAULT_LR = 1e-3
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8


def adam_step(params, grads, moments, t, lr=DEFAULT_LR, beta1=DEFAULT_BETAS[0], beta2=DEFAULT_BETAS[1], eps=DEFAULT_EPS):
    """One bias-corrected Adam update.

    ``moments`` is a pair of lists ``(m, v)`` aligned with ``params``.
    Returns new ``(params, (m, v))``; nothing is modified in place.
    """
    if t < 1:
        raise ValueError(f"Adam step counter starts at 1, got {t}")
    m_list, v_list = moments
    if not (len(params) == len(grads) == len(m_list) == len(v_list)):
        raise ValueError("params, grads and moments must have equal length")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_list, v_list):
        if p.shape != g.shape or p.shape != m.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch in Adam step: {p.shape} vs {g.shape}")
        dtype = p.dtype
        m = (beta1 * m + (1 - beta1) * g).astype(dtype)
        v = (beta2 * v + (1 - beta2) * (g * g)).astype(dtype)
        step = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(dtype)
        new_p.append(p - step)
        new_m.append(m)
        new_v.append(v)
    return new_p, (new_m, new_v)


class Adam:
    """Holds moments for a fixed list of tensors and rebinds their data."""

    def __init__(self, tensors: Sequence[Tensor], lr=DEFAULT_LR, betas=DEFAULT_BETAS, eps=DEFAULT_EPS):
        self.tensors = list(tensors)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.tensors]
        self.v = [np.zeros_like(p.data) for p in self.tensors]

    def step(self) -> None:
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.tensors]
        new_p, (self.m, self.v) = adam_step(
            [p.data for p in self.tensors], grads, (self.m, self.v), self.t,
            self.lr, self.betas[0], self.betas[1], self.eps,
        )
        for tensor, data in zip(self.tensors, new_p):
            tensor.data = data
            tensor.grad = None
