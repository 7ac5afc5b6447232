"""Composite layers built from tensor primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise channel projection; weight is [Cout, Cin, 1, 1], bias [Cout]."""
    out = T.conv2d(x, weight)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def layer_norm_channels(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over channels independently at every pixel of [B, C, H, W]."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    xn = xc * T.power(var + eps, -0.5)
    return xn * gain.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)


@dataclass
class AttentionWeights:
    """1x1 projections for single-head attention; ``None`` means identity."""

    q: Tensor | None = None
    k: Tensor | None = None
    v: Tensor | None = None
    o: Tensor | None = None


def _to_windows(x: Tensor, w: int) -> Tensor:
    B, C, H, W = x.shape
    x = x.reshape(B, C, H // w, w, W // w, w)
    x = x.transpose(0, 2, 4, 3, 5, 1)  # B, nh, nw, w, w, C
    return x.reshape(B * (H // w) * (W // w), w * w, C)


def _from_windows(x: Tensor, w: int, shape: tuple[int, ...]) -> Tensor:
    B, C, H, W = shape
    x = x.reshape(B, H // w, W // w, w, w, C)
    x = x.transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(B, C, H, W)


def windowed_attention(x: Tensor, wsize: int, proj: AttentionWeights | None = None) -> Tensor:
    """Scaled dot-product attention restricted to non-overlapping windows.

    Each ``wsize x wsize`` window is an independent set of ``wsize**2`` pixel
    tokens with C features; nothing mixes across windows.
    """
    B, C, H, W = x.shape
    if wsize < 1 or H % wsize or W % wsize:
        raise ValueError(f"spatial dims {H}x{W} are not divisible by window size {wsize}")
    proj = proj or AttentionWeights()
    q = conv1x1(x, proj.q) if proj.q is not None else x
    k = conv1x1(x, proj.k) if proj.k is not None else x
    v = conv1x1(x, proj.v) if proj.v is not None else x
    qw, kw, vw = (_to_windows(t, wsize) for t in (q, k, v))
    scores = (qw @ kw.transpose(0, 2, 1)) * float(1.0 / np.sqrt(C))
    attn = T.softmax(scores, axis=-1)
    out = _from_windows(attn @ vw, wsize, x.shape)
    if proj.o is not None:
        out = conv1x1(out, proj.o)
    return out
