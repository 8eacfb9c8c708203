"""Adam with bias-corrected moments."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import CnnModel

__all__ = ["AdamHyperparams", "AdamState", "adam_update", "adam_step"]


@dataclass(frozen=True)
class AdamHyperparams:
    # "momentum = 0.9" in the training recipe is the first-moment decay beta1.
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    minibatch: int = 1024

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epsilon <= 0 or self.minibatch < 1:
            raise ValueError("learning_rate, epsilon and minibatch must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(
            m=tuple(np.zeros_like(p, dtype=np.float64) for p in params),
            v=tuple(np.zeros_like(p, dtype=np.float64) for p in params),
        )


def adam_update(params, state: AdamState, grads, hyper: AdamHyperparams):
    """One Adam step on a sequence of arrays. Returns ``(new_params, new_state)``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, gradients and optimizer state differ in length")
    t = state.t + 1
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_params.append(p - hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.epsilon))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(tuple(new_m), tuple(new_v), t)


def adam_step(model: CnnModel, state: AdamState, grads, hyper: AdamHyperparams):
    params, state = adam_update(model.params, state, grads, hyper)
    return model.replace_params(params), state
