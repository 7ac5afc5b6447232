from __future__ import annotations

import numpy as np
import pytest

from nests6 import tensor as T
from nests6.memory import (
    DeepOptimizer2D,
    MemoryMode,
    MemoryModeError,
    MemoryState,
    compute_surprise,
    memory_decay,
    memory_inject,
    memory_write,
)
from nests6.tensor import Tensor

D, H, W = 3, 2, 2


@pytest.fixture
def opt(f64):
    params = DeepOptimizer2D.init_params(D, np.random.default_rng(0), np.float64)
    return DeepOptimizer2D({k: T.parameter(v, name=k) for k, v in params.items()})


def state(values, mode=MemoryMode.TEACHER_FORCED) -> MemoryState:
    return MemoryState(Tensor(np.asarray(values, dtype=np.float64)), mode)


def set_lambda(opt: DeepOptimizer2D, lam: float) -> None:
    opt.p["slow.lambda_logit"].data = np.array(np.log(lam / (1 - lam)))


# ---------------------------------------------------------------- surprise
def test_surprise_examples():
    assert np.all(compute_surprise(np.ones((2, 2)), np.ones((2, 2))) == 0)
    s = compute_surprise(np.array([[1.0, -2.0]]), np.zeros((1, 2)))
    assert s.shape == (1, 1, 1, 2) and s.ravel().tolist() == [1.0, 2.0]


def test_surprise_matches_abs_oracle(rng):
    a, b = rng.standard_normal((4, 5, 5)), rng.standard_normal((4, 5, 5))
    np.testing.assert_array_equal(compute_surprise(a, b)[:, 0], np.abs(a - b))


def test_surprise_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        compute_surprise(np.zeros((2, 2)), np.zeros((2, 3)))


# ---------------------------------------------------------------- write
def test_initial_lambda_is_point_nine(opt):
    assert opt.decay().item() == pytest.approx(0.9, rel=1e-12)


def test_half_write_from_zero(opt, rng):
    set_lambda(opt, 0.5)
    z, s = Tensor(rng.standard_normal((1, D, H, W))), rng.random((1, 1, H, W))
    m = memory_write(state(np.zeros((1, D, H, W))), z, s, opt).m.data
    np.testing.assert_allclose(m, 0.5 * opt.propose(z, Tensor(s)).data, rtol=1e-14)


def test_near_one_lambda_freezes_memory(opt, rng):
    opt.p["slow.lambda_logit"].data = np.array(40.0)
    prev = rng.standard_normal((1, D, H, W))
    m = memory_write(state(prev), Tensor(rng.standard_normal((1, D, H, W))), rng.random((1, 1, H, W)), opt)
    np.testing.assert_allclose(m.m.data, prev, atol=1e-12)


def test_write_is_convex_and_bounded(opt, rng):
    set_lambda(opt, 0.7)
    prev = rng.uniform(-3, 3, (2, D, H, W))
    z = Tensor(rng.standard_normal((2, D, H, W)) * 5)
    s = rng.random((2, 1, H, W))
    m = memory_write(state(prev), z, s, opt).m.data
    phi = opt.propose(z, Tensor(s)).data
    assert np.abs(phi).max() <= 1.0
    assert np.all(m <= np.maximum(prev, phi) + 1e-12) and np.all(m >= np.minimum(prev, phi) - 1e-12)
    assert np.abs(m).max() <= max(np.abs(prev).max(), 1.0)


def test_write_rejected_while_free_running(opt):
    mem = state(np.zeros((1, D, H, W)), MemoryMode.FREE_RUNNING)
    with pytest.raises(MemoryModeError):
        memory_write(mem, Tensor(np.zeros((1, D, H, W))), np.zeros((1, 1, H, W)), opt)


def test_write_counter_tracks_proposals(opt):
    before = opt.write_calls
    memory_write(state(np.zeros((1, D, H, W))), Tensor(np.zeros((1, D, H, W))), np.zeros((1, 1, H, W)), opt)
    assert opt.write_calls == before + 1


# ---------------------------------------------------------------- decay
def test_decay_is_geometric(opt, rng):
    m0 = rng.standard_normal((1, D, H, W))
    mem = state(m0, MemoryMode.FREE_RUNNING)
    for _ in range(5):
        mem = memory_decay(mem, opt)
    np.testing.assert_allclose(mem.m.data, m0 * 0.9**5, rtol=1e-12)
    assert opt.write_calls == 0


def test_decay_arithmetic_and_fixed_point(opt):
    mem = state([1.0], MemoryMode.FREE_RUNNING)
    mem = memory_decay(memory_decay(mem, opt), opt)
    assert mem.m.data[0] == pytest.approx(0.81, rel=1e-12)
    assert memory_decay(state([0.0]), opt).m.data[0] == 0.0


# ---------------------------------------------------------------- inject
def test_inject_zero_memory_is_identity(opt, rng):
    z = Tensor(rng.standard_normal((1, D, H, W)))
    assert memory_inject(z, state(np.zeros((1, D, H, W))), opt).data.tobytes() == z.data.tobytes()


@pytest.mark.parametrize("bias,expect_open", [(-1e4, False), (1e4, True)])
def test_saturated_gate(opt, rng, bias, expect_open):
    opt.p["slow.gate.weight"].data[:] = 0
    opt.p["slow.gate.bias"].data[:] = bias
    z = Tensor(rng.standard_normal((1, D, H, W)))
    m = rng.standard_normal((1, D, H, W))
    out = memory_inject(z, state(m), opt).data
    np.testing.assert_allclose(out - z.data, m if expect_open else 0, atol=1e-12)


def test_injection_bounded_by_memory(opt, rng):
    z = Tensor(rng.standard_normal((3, D, H, W)) * 4)
    m = rng.standard_normal((3, D, H, W))
    assert np.all(np.abs(memory_inject(z, state(m), opt).data - z.data) <= np.abs(m) + 1e-15)
