"""Adam with bias correction.

The moment decay rates default to beta1=0.5, beta2=0.9: much shorter moment
memory than the common 0.9/0.999, which keeps adversarial updates from
coasting on stale directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.5, beta2: float = 0.9, eps: float = 1e-8) -> AdamState:
    """One in-place update of ``params``; returns the advanced state.

    Refuses the whole step (no state or parameter is touched) if any
    gradient entry is non-finite.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for g in grads:
        if g is None or not np.all(np.isfinite(g)):
            raise NumericsError("non-finite gradient; step refused")
    state.t += 1
    t = state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class Adam:
    """Convenience wrapper stepping a fixed list of graph parameters."""

    def __init__(self, params, lr: float, beta1: float = 0.5,
                 beta2: float = 0.9, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self):
        grads = [p.grad for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.lr,
                  self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
