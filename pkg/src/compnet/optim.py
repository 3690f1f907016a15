"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(params: dict, alpha=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    state = AdamState(alpha=alpha, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.value)
        state.v[name] = np.zeros_like(p.value)
    return state


def adam_step(state: AdamState, params: dict, grads: dict) -> None:
    """One update: m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;
    theta <- theta - alpha * m_hat / (sqrt(v_hat) + eps)."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if g.shape != p.value.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter "
                             f"shape {p.value.shape} for {name}")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.value = p.value - state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)
