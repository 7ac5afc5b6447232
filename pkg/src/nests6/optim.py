from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None
    step_count: int = 0
    skipped: int = 0


def adam_update(param: Tensor, grad: np.ndarray, state: AdamState) -> bool:
    """Bias-corrected Adam step applied in place.

    Returns False (and leaves everything untouched except ``state.skipped``)
    when the gradient holds a non-finite value.
    """
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameter {param.shape}")
    if not np.all(np.isfinite(grad)):
        state.skipped += 1
        return False
    if state.first_moment is None:
        state.first_moment = np.zeros_like(param.data)
        state.second_moment = np.zeros_like(param.data)
    m, v = state.first_moment, state.second_moment
    state.step_count += 1
    t = state.step_count
    m *= state.beta1
    m += (1 - state.beta1) * grad
    v *= state.beta2
    v += (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    param.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype, copy=False)
    return True


@dataclass
class Adam:
    """Adam over a named parameter set, one :class:`AdamState` per tensor."""

    params: dict[str, Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in self.params:
            self.states[name] = AdamState(self.lr, self.beta1, self.beta2, self.eps)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            adam_update(p, grads[name], self.states[name])


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total
