"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .core import Tensor


class AdamState:
    """First/second moment estimates and step counter for a parameter set."""

    def __init__(self, params: dict[str, Tensor], learning_rate: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params: dict[str, Tensor], state: AdamState):
    """One bias-corrected Adam update; parameters without grads are skipped."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = state.m[name] / (1 - state.beta1 ** t)
        v_hat = state.v[name] / (1 - state.beta2 ** t)
        p.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


def zero_grads(params: dict[str, Tensor]):
    for p in params.values():
        p.zero_grad()
