"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN/inf; carries the parameter identity."""


class AdamState:
    def __init__(self, params: list[np.ndarray]):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def matches(self, params: list[np.ndarray]) -> bool:
        return (len(params) == len(self.m)
                and all(p.shape == m.shape for p, m in zip(params, self.m)))


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              names: list[str] | None = None):
    """Update params in place; returns the state (step counter incremented)."""
    if not state.matches(params):
        raise ValueError("Adam state does not match parameter shapes")
    if len(grads) != len(params):
        raise ValueError("grads/params length mismatch")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"param[{i}]"
            raise NonFiniteGradientError(f"non-finite gradient for {name}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state
