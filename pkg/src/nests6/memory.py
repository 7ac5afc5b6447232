"""Slow learner: persistent spatial memory written by a learned optimizer.

The memory ``m`` lives at latent resolution [B, D, H_p, W_p]. With ground
truth available (teacher forcing) each step mixes in a write proposed from the
current context and the surprise signal::

    m_t = lam * m_{t-1} + (1 - lam) * tanh(phi(z_t, s_t))

During free-running rollouts there is no surprise and ``m_t = lam * m_{t-1}``.
The memory enters the fast learner through a sigmoid gate,
``z_t + sigmoid(g(z_t)) * m_t``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .functional import conv1x1
from .tensor import Tensor


class MemoryMode(str, enum.Enum):
    TEACHER_FORCED = "teacher_forced"
    FREE_RUNNING = "free_running"


@dataclass
class MemoryState:
    m: Tensor
    mode: MemoryMode = MemoryMode.TEACHER_FORCED

    @classmethod
    def zeros(
        cls, batch: int, channels: int, hp: int, wp: int, mode: MemoryMode = MemoryMode.TEACHER_FORCED
    ) -> MemoryState:
        return cls(Tensor(np.zeros((batch, channels, hp, wp), dtype=T.get_default_dtype())), mode)

    def detached(self, mode: MemoryMode | None = None) -> MemoryState:
        return MemoryState(Tensor(self.m.data.copy()), mode or self.mode)


class MemoryModeError(RuntimeError):
    pass


class DeepOptimizer2D:
    """Write network, injection gate and decay for the spatial memory.

    Parameters are held by reference in the owning model's parameter dict
    under the ``slow.`` prefix. ``write_calls`` counts invocations of the
    write path so rollouts can prove they never touch it.
    """

    def __init__(self, params: dict[str, Tensor]):
        self.p = params
        self.write_calls = 0

    @staticmethod
    def init_params(channels: int, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
        D = channels

        def w(cout: int, cin: int) -> np.ndarray:
            return (rng.standard_normal((cout, cin, 1, 1)) / np.sqrt(cin)).astype(dtype)

        return {
            "slow.phi1.weight": w(D, D + 1),
            "slow.phi1.bias": np.zeros(D, dtype),
            "slow.phi2.weight": w(D, D),
            "slow.phi2.bias": np.zeros(D, dtype),
            "slow.gate.weight": w(D, D),
            "slow.gate.bias": np.zeros(D, dtype),
            "slow.lambda_logit": np.array(np.log(0.9 / 0.1), dtype),
        }

    def decay(self) -> Tensor:
        return T.sigmoid(self.p["slow.lambda_logit"])

    def propose(self, z_t: Tensor, s: Tensor) -> Tensor:
        """phi(z_t, s_t), squashed into (-1, 1)."""
        self.write_calls += 1
        h = T.silu(conv1x1(T.concat([z_t, s], axis=1), self.p["slow.phi1.weight"], self.p["slow.phi1.bias"]))
        return T.tanh(conv1x1(h, self.p["slow.phi2.weight"], self.p["slow.phi2.bias"]))

    def gate(self, z_t: Tensor) -> Tensor:
        return T.sigmoid(conv1x1(z_t, self.p["slow.gate.weight"], self.p["slow.gate.bias"]))


def compute_surprise(y_hat_prev: np.ndarray, y_prev: np.ndarray) -> np.ndarray:
    """Per-pixel absolute one-step error as a [B, 1, H_p, W_p] array (no gradient)."""
    a = np.asarray(y_hat_prev.data if isinstance(y_hat_prev, Tensor) else y_hat_prev)
    b = np.asarray(y_prev.data if isinstance(y_prev, Tensor) else y_prev)
    if a.shape != b.shape:
        raise ValueError(f"surprise operands differ in shape: {a.shape} vs {b.shape}")
    s = np.abs(a - b)
    if s.ndim == 2:
        s = s[None]
    return s[:, None]


def memory_write(mem: MemoryState, z_t: Tensor, s: np.ndarray | Tensor, opt: DeepOptimizer2D) -> MemoryState:
    if mem.mode is not MemoryMode.TEACHER_FORCED:
        raise MemoryModeError("memory writes need a surprise signal; not allowed while free-running")
    s_t = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=z_t.dtype))
    lam = opt.decay()
    m = lam * mem.m + (1 - lam) * opt.propose(z_t, s_t)
    return MemoryState(m, mem.mode)


def memory_decay(mem: MemoryState, opt: DeepOptimizer2D) -> MemoryState:
    return MemoryState(opt.decay() * mem.m, mem.mode)


def memory_inject(z_t: Tensor, mem: MemoryState, opt: DeepOptimizer2D) -> Tensor:
    return z_t + opt.gate(z_t) * mem.m
