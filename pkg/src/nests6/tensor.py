"""Dense arrays with define-by-run reverse-mode differentiation.

A :class:`Tape` records every primitive op whose inputs require gradients while
it is active. :func:`backprop` walks the recorded nodes in reverse and returns
gradients for the leaf parameters. Outside a tape the same ops run as plain
numpy computations with no saved activations.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE: np.dtype = np.dtype(np.float32)
_ACTIVE_TAPES: list[Tape] = []


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype: Any) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt


@contextlib.contextmanager
def default_dtype(dtype: Any) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors and parameters."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "tape_id")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f" or not isinstance(data, (np.ndarray, np.generic)):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.name = name
        self.tape_id: int | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Any) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, idx: Any) -> Tensor:
        return getitem(self, idx)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape: Any) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes if axes else None)

    def exp(self) -> Tensor:
        return exp(self)


def parameter(data: Any, name: str | None = None) -> Tensor:
    """A leaf tensor that receives gradients, cast to the default dtype."""
    return Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=True, name=name)


# ----------------------------------------------------------------------
# Tape
# ----------------------------------------------------------------------
@dataclass
class Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of primitive ops; parents always precede children."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> Tape:
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _ACTIVE_TAPES.remove(self)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward, op: str) -> None:
        out.tape_id = len(self.nodes)
        self.nodes.append(Node(out, parents, backward, op))


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording, e.g. for detached side computations."""
    saved = list(_ACTIVE_TAPES)
    _ACTIVE_TAPES.clear()
    try:
        yield
    finally:
        _ACTIVE_TAPES.extend(saved)


def custom_op(data: np.ndarray, parents: tuple[Any, ...], backward, op: str) -> Tensor:
    """Wrap ``data`` as the output of a primitive; ``backward(g)`` returns one
    gradient (or None) per parent."""
    out = Tensor(data)
    if _ACTIVE_TAPES and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        recorded = tuple(p if isinstance(p, Tensor) else _CONSTANT for p in parents)
        _ACTIVE_TAPES[-1].record(out, recorded, backward, op)
    return out


def _on_tape(tape: Tape, t: Tensor) -> bool:
    i = t.tape_id
    return i is not None and i < len(tape.nodes) and tape.nodes[i].out is t


def backprop(
    tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None
) -> dict[Tensor, np.ndarray]:
    """Return d(loss)/d(p) for each requires-grad leaf.

    When ``params`` is given the result has exactly those keys, with zero
    gradients for parameters the loss does not depend on.
    """
    if loss.size != 1:
        raise ValueError(f"backprop needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if not _on_tape(tape, parent):
                leaves[id(parent)] = parent
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    if params is None:
        if loss.requires_grad and not _on_tape(tape, loss):
            leaves[id(loss)] = loss
        return {t: np.array(grads[k], dtype=t.dtype) for k, t in leaves.items()}
    out: dict[Tensor, np.ndarray] = {}
    for p in params:
        g = grads.get(id(p))
        out[p] = np.array(g, dtype=p.dtype) if g is not None else np.zeros_like(p.data)
    return out


# ----------------------------------------------------------------------
# Elementwise and shape primitives
# ----------------------------------------------------------------------
def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _data(x: Any) -> Any:
    return x.data if isinstance(x, Tensor) else x


# stands in for non-tensor operands on the tape; never receives gradients
_CONSTANT = Tensor(np.zeros(()))


def add(a: Any, b: Any) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad + bd
    sa, sb = np.shape(ad), np.shape(bd)
    return custom_op(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Any, b: Any) -> Tensor:
    ad, bd = _data(a), _data(b)
    sa, sb = np.shape(ad), np.shape(bd)
    return custom_op(ad - bd, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a: Any, b: Any) -> Tensor:
    ad, bd = _data(a), _data(b)
    sa, sb = np.shape(ad), np.shape(bd)

    def backward(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return custom_op(ad * bd, (a, b), backward, "mul")


def div(a: Any, b: Any) -> Tensor:
    ad, bd = _data(a), _data(b)
    sa, sb = np.shape(ad), np.shape(bd)
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, sa), _unbroadcast(-g * out / bd, sb)

    return custom_op(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    return custom_op(x**exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return custom_op(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return custom_op(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return custom_op(y, (a,), lambda g: (g * 0.5 / y,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return custom_op(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return custom_op(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(x, 0).astype(x.dtype, copy=False)
    return custom_op(y, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return custom_op(x * s, (a,), lambda g: (g * s * (1 + x * (1 - s)),), "silu")


def tabs(a: Tensor) -> Tensor:
    x = a.data
    return custom_op(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def tsum(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return custom_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return custom_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx: Any) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return custom_op(a.data[idx], (a,), backward, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return custom_op(
        np.concatenate([x.data for x in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    n = len(xs)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return custom_op(np.stack([x.data for x in xs], axis=axis), tuple(xs), backward, "stack")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return custom_op(ad @ bd, (a, b), backward, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return custom_op(y, (a,), backward, "softmax")


# ----------------------------------------------------------------------
# Convolution
# ----------------------------------------------------------------------
def conv2d(x: Tensor, kernel: Tensor, groups: int = 1, padding: int = 0) -> Tensor:
    """Stride-1 grouped cross-correlation with zero padding.

    x: [B, Cin, H, W]; kernel: [Cout, Cin/groups, kh, kw].
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    B, Cin, H, W = x.shape
    Cout, Cg, kh, kw = kernel.shape
    if groups < 1 or Cin % groups or Cout % groups:
        raise ValueError(f"channels (in={Cin}, out={Cout}) not divisible by groups={groups}")
    if Cg != Cin // groups:
        raise ValueError(
            f"kernel expects {Cg} input channels per group, input provides {Cin // groups} "
            f"(input {x.shape}, kernel {kernel.shape}, groups={groups})"
        )
    p = padding
    Ho, Wo = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {H + 2 * p}x{W + 2 * p}")
    G, Og = groups, Cout // groups
    xd, wd = x.data, kernel.data

    if kh == 1 and kw == 1 and p == 0 and G == 1:
        wm = wd.reshape(Cout, Cin)
        x3 = xd.reshape(B, Cin, H * W)
        out = (wm @ x3).reshape(B, Cout, H, W)

        def backward(g):
            g3 = g.reshape(B, Cout, H * W)
            gx = (wm.T @ g3).reshape(xd.shape)
            gw = np.tensordot(g3, x3, axes=([0, 2], [0, 2])).reshape(kernel.shape)
            return gx, gw

        return custom_op(out, (x, kernel), backward, "conv2d")

    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd

    if Cg == 1 and Og == 1:
        # depthwise: one filter per channel, accumulate shifted copies
        out = np.zeros((B, Cout, Ho, Wo), dtype=xd.dtype)
        taps = [(i, j, wd[:, 0, i, j].reshape(1, -1, 1, 1)) for i in range(kh) for j in range(kw)]
        for i, j, wij in taps:
            out += xp[:, :, i : i + Ho, j : j + Wo] * wij

        def backward(g):
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            gw = np.zeros(kernel.shape, dtype=wd.dtype)
            for i, j, wij in taps:
                gxp[:, :, i : i + Ho, j : j + Wo] += g * wij
                gw[:, 0, i, j] = np.sum(g * xp[:, :, i : i + Ho, j : j + Wo], axis=(0, 2, 3))
            gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
            return gx, gw

        return custom_op(out, (x, kernel), backward, "conv2d")

    K = Cg * kh * kw
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B, Cin, Ho, Wo, kh, kw
    cols = win.reshape(B, G, Cg, Ho, Wo, kh, kw).transpose(0, 1, 2, 5, 6, 3, 4).reshape(B, G, K, Ho * Wo)
    wm = wd.reshape(G, Og, K)
    out = (wm @ cols).reshape(B, Cout, Ho, Wo)

    def backward(g):
        g4 = g.reshape(B, G, Og, Ho * Wo)
        gw = (g4 @ np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(kernel.shape)
        gcols = (np.swapaxes(wm, -1, -2) @ g4).reshape(B, Cin, kh, kw, Ho, Wo)
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + Ho, j : j + Wo] += gcols[:, :, i, j]
        gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        return gx, gw

    return custom_op(out, (x, kernel), backward, "conv2d")
