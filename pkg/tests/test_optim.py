from __future__ import annotations

import math

import numpy as np

from nests6 import tensor as T
from nests6.optim import Adam, AdamState, adam_update, clip_grad_norm


def adam_scalar(x: float, grads: list[float], lr=1e-3, b1=0.9, b2=0.999, eps=1e-8) -> float:
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return x


def test_adam_matches_scalar_recurrence(f64):
    p = T.parameter(np.array([0.5, -1.0]))
    opt = Adam({"p": p}, lr=0.01)
    seq = [np.array([0.3, -2.0]), np.array([-0.1, 0.5]), np.array([1.0, 1.0])]
    for g in seq:
        opt.step({"p": g.copy()})
    for i, x0 in enumerate([0.5, -1.0]):
        assert p.data[i] == adam_scalar(x0, [float(g[i]) for g in seq], lr=0.01)


def test_first_step_moves_by_lr_times_sign(f64):
    p = T.parameter(np.array([0.0, 0.0]))
    adam_update(p, np.array([5.0, -0.2]), AdamState(lr=0.1))
    np.testing.assert_allclose(p.data, [-0.1, 0.1], rtol=1e-6)


def test_non_finite_grad_skips_update():
    p = T.parameter(np.ones(3))
    st = AdamState()
    assert not adam_update(p, np.array([1.0, np.nan, 0.0], dtype=np.float32), st)
    assert st.skipped == 1 and st.step_count == 0
    np.testing.assert_array_equal(p.data, np.ones(3))


def test_zero_lr_keeps_params_bit_identical():
    p = T.parameter(np.linspace(-1, 1, 5))
    before = p.data.copy()
    opt = Adam({"p": p}, lr=0.0)
    for _ in range(3):
        opt.step({"p": np.full(5, 2.0, dtype=np.float32)})
    np.testing.assert_array_equal(p.data, before)


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(grads, 1.0) == 5.0
    np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8])
    small = {"a": np.array([0.1])}
    clip_grad_norm(small, 1.0)
    assert small["a"][0] == 0.1
