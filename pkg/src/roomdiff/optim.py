"""Adam optimizer over a flat parameter array."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, dtype=np.float32, **kw) -> "AdamState":
        return cls(np.zeros(size, dtype=dtype), np.zeros(size, dtype=dtype),
                   **kw)


def adam_update(params: np.ndarray, grad: np.ndarray, state: AdamState,
                lr: float) -> None:
    """One in-place Adam step with bias correction."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m += (1.0 - b1) * (grad - state.m)
    state.v += (1.0 - b2) * (grad * grad - state.v)
    mhat = state.m / (1.0 - b1 ** state.step)
    vhat = state.v / (1.0 - b2 ** state.step)
    params -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(params.dtype)
