"""Random selective-scan problems shared by the unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from nests6 import tensor as T
from nests6.model import SsmParams
from nests6.tensor import Tensor


def random_scan_case(rng: np.random.Generator, dtype=np.float64, shared_a: bool | None = None):
    n_steps, B, D, Ds = (int(v) for v in rng.integers(1, 5, size=4))
    H, W = (int(v) for v in rng.integers(1, 4, size=2))
    if shared_a is None:
        shared_a = bool(rng.integers(0, 2))
    a_shape = (1, 1, D, Ds, 1, 1) if shared_a else (n_steps, B, D, Ds, H, W)

    def arr(*shape, lo=None, hi=None):
        x = rng.uniform(lo, hi, shape) if lo is not None else rng.standard_normal(shape)
        return x.astype(dtype)

    with T.default_dtype(dtype):
        x = T.parameter(arr(n_steps, B, D, H, W))
        prm = SsmParams(
            delta=T.parameter(arr(n_steps, B, D, H, W, lo=0.01, hi=1.0)),
            a_eff=T.parameter(-arr(*a_shape, lo=0.1, hi=3.0)),
            b_eff=T.parameter(arr(n_steps, B, Ds, H, W)),
            c_eff=T.parameter(arr(n_steps, B, Ds, H, W)),
            d_skip=T.parameter(arr(D)),
        )
        h0 = T.parameter(arr(B, D, Ds, H, W))
    return x, prm, h0


def as_tensors(x: Tensor, prm: SsmParams, h0: Tensor) -> list[Tensor]:
    return [x, prm.delta, prm.a_eff, prm.b_eff, prm.c_eff, prm.d_skip, h0]
