"""Fast learner: differenced input, conv stem, Conv-SSM blocks and patch head.

Each block mixes locally (depthwise 3x3 conv, then windowed attention, both
pre-normalized residuals), then normalizes again, predicts spatially varying
SSM coefficients with 1x1 convolutions and adds the selective scan of the
normalized stream back into the residual::

    h_t = exp(a_t * delta_t) * h_{t-1} + (delta_t * x_t) * b_t
    y_t = sum_s h_t[s] * c_t[s] + d_skip * x_t

The state carries ``state_dim`` entries for every latent channel, so ``h`` has
shape [B, D, D_s, H_p, W_p] and the readout sums the D_s axis away.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .functional import AttentionWeights, conv1x1, layer_norm_channels, windowed_attention
from .memory import DeepOptimizer2D, MemoryMode, MemoryState
from .tensor import Tensor


def default_window(hp: int, wp: int, limit: int = 5) -> int:
    """Largest window edge <= limit dividing both patch dims."""
    g = np.gcd(hp, wp)
    return max(d for d in range(1, min(limit, g) + 1) if g % d == 0)


@dataclass
class ModelConfig:
    patch_h: int = 10
    patch_w: int = 10
    channels: int = 16
    state_dim: int = 4
    n_blocks: int = 2
    window_size: int = 0  # 0 picks default_window()
    low_rank: int = 2
    seq_len: int = 6
    memory: bool = True
    delta_min: float = 1e-4

    def __post_init__(self) -> None:
        if self.window_size == 0:
            self.window_size = default_window(self.patch_h, self.patch_w)
        self.validate()

    def validate(self) -> None:
        if min(self.patch_h, self.patch_w, self.channels, self.state_dim, self.seq_len) < 1:
            raise ValueError(f"model dimensions must be positive: {self}")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        if self.patch_h % self.window_size or self.patch_w % self.window_size:
            raise ValueError(
                f"patch {self.patch_h}x{self.patch_w} is not divisible by window size {self.window_size}"
            )
        if not 0 <= self.low_rank <= self.state_dim:
            raise ValueError(f"low_rank must lie in [0, state_dim={self.state_dim}], got {self.low_rank}")

    def to_meta(self) -> dict[str, str]:
        return {f"model.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> ModelConfig:
        kw = {}
        for f in fields(cls):
            raw = meta.get(f"model.{f.name}")
            if raw is None:
                continue
            if f.type in ("bool", bool):
                kw[f.name] = raw == "True"
            elif f.type in ("float", float):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = int(raw)
        return cls(**kw)


@dataclass
class PatchWindow:
    x_seq: np.ndarray  # [T, H_p, W_p], normalized units
    patch_origin: tuple[int, int] = (0, 0)

    @property
    def T(self) -> int:
        return self.x_seq.shape[0]


@dataclass
class SsmParams:
    """Scan coefficients stacked over time (leading axis T).

    delta [T, B, D, H, W] > 0; a_eff broadcastable to [T, B, D, D_s, H, W],
    < 0; b_eff, c_eff [T, B, D_s, H, W]; d_skip [D].
    """

    delta: Tensor
    a_eff: Tensor
    b_eff: Tensor
    c_eff: Tensor
    d_skip: Tensor

    def step(self, t: int) -> SsmParams:
        a = self.a_eff if self.a_eff.shape[0] == 1 else self.a_eff[t : t + 1]
        return SsmParams(self.delta[t : t + 1], a, self.b_eff[t : t + 1], self.c_eff[t : t + 1], self.d_skip)


# ----------------------------------------------------------------------
# stateless pieces
# ----------------------------------------------------------------------
def build_input(x_seq: np.ndarray) -> np.ndarray:
    """[..., T, H, W] -> [..., T, 2, H, W]: the frame and its temporal difference.

    The first difference is zero (the frame before the window is taken to be
    the first frame itself).
    """
    x = np.asarray(x_seq)
    prev = np.concatenate([x[..., :1, :, :], x[..., :-1, :, :]], axis=-3)
    return np.stack([x, x - prev], axis=-3)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def ssm_scan(x_seq: Tensor, params: SsmParams, h0: Tensor) -> tuple[Tensor, Tensor]:
    """Selective scan over x_seq [T, B, D, H, W] from state h0 [B, D, D_s, H, W].

    Recorded on the tape as one primitive; the returned final state is a
    detached value (gradients flow through the outputs ``y`` only).
    """
    x = x_seq.data
    n_steps, B, D, H, W = x.shape
    delta = params.delta.data
    a_shape = params.a_eff.shape
    if len(a_shape) != 6:
        raise ValueError(f"a_eff must be 6-d [T, B, D, D_s, H, W]-broadcastable, got {a_shape}")
    a = np.broadcast_to(params.a_eff.data, (n_steps, B, D, a_shape[3], H, W))
    bm, cm, dskip = params.b_eff.data, params.c_eff.data, params.d_skip.data
    Ds = a.shape[3]
    hs = np.empty((n_steps + 1, B, D, Ds, H, W), dtype=x.dtype)
    hs[0] = h0.data
    decays = np.empty_like(hs[1:])
    y = np.empty_like(x)
    skip = dskip.reshape(1, -1, 1, 1)
    for t in range(n_steps):
        decays[t] = np.exp(a[t] * delta[t][:, :, None])
        drive = (delta[t] * x[t])[:, :, None] * bm[t][:, None]
        hs[t + 1] = decays[t] * hs[t] + drive
        y[t] = (hs[t + 1] * cm[t][:, None]).sum(axis=2) + skip * x[t]
        if not np.all(np.isfinite(y[t])):
            raise FloatingPointError(f"non-finite value in selective scan at step {t}")

    def backward(gy: np.ndarray):
        gx = np.empty_like(x)
        gdelta = np.empty_like(delta)
        ga = np.empty(a.shape, dtype=x.dtype)
        gb = np.empty_like(bm)
        gc = np.empty_like(cm)
        gskip = np.zeros_like(dskip)
        gh = np.zeros_like(hs[0])
        for t in reversed(range(n_steps)):
            g = gy[t]
            gh = gh + g[:, :, None] * cm[t][:, None]
            gc[t] = (g[:, :, None] * hs[t + 1]).sum(axis=1)
            gskip += (g * x[t]).sum(axis=(0, 2, 3))
            # through h_t = decay * h_{t-1} + (delta * x) * b
            gexp = gh * hs[t] * decays[t]
            ga[t] = gexp * delta[t][:, :, None]
            gdx = (gh * bm[t][:, None]).sum(axis=2)
            gb[t] = (gh * (delta[t] * x[t])[:, :, None]).sum(axis=1)
            gdelta[t] = (gexp * a[t]).sum(axis=2) + gdx * x[t]
            gx[t] = gdx * delta[t] + g * skip
            gh = gh * decays[t]
        return gx, gdelta, _unbroadcast(ga, a_shape), gb, gc, gskip, gh

    out = T.custom_op(
        y, (x_seq, params.delta, params.a_eff, params.b_eff, params.c_eff, params.d_skip, h0), backward, "ssm_scan"
    )
    return out, Tensor(hs[-1].copy())


def ssm_scan_reference(
    x_seq: np.ndarray, params: SsmParams, h0: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Scalar loop over every (t, b, d, i, j, s); test oracle for ssm_scan."""
    x_seq = np.asarray(x_seq.data if isinstance(x_seq, Tensor) else x_seq)
    h = np.array(h0.data if isinstance(h0, Tensor) else h0)
    n_steps, B, D, H, W = x_seq.shape
    Ds = h.shape[2]
    a = np.broadcast_to(params.a_eff.data, (n_steps, B, D, Ds, H, W))
    delta, bb, cc, dd = params.delta.data, params.b_eff.data, params.c_eff.data, params.d_skip.data
    y = np.zeros_like(x_seq)
    for t in range(n_steps):
        for b in range(B):
            for d in range(D):
                for i in range(H):
                    for j in range(W):
                        x = x_seq[t, b, d, i, j]
                        dl = delta[t, b, d, i, j]
                        acc = None
                        for s in range(Ds):
                            hs = np.exp(a[t, b, d, s, i, j] * dl) * h[b, d, s, i, j] + (dl * x) * bb[t, b, s, i, j]
                            h[b, d, s, i, j] = hs
                            term = hs * cc[t, b, s, i, j]
                            acc = term if acc is None else acc + term
                        y[t, b, d, i, j] = acc + dd[d] * x
    return y, h


# ----------------------------------------------------------------------
# model
# ----------------------------------------------------------------------
def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    dt = T.get_default_dtype()
    D, Ds, r = cfg.channels, cfg.state_dim, cfg.low_rank

    def w(*shape: int, fan_in: int) -> np.ndarray:
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dt)

    p: dict[str, np.ndarray] = {
        "fast.stem.weight": w(D, 2, 3, 3, fan_in=18),
        "fast.stem.bias": np.zeros(D, dt),
    }
    for i in range(cfg.n_blocks):
        k = f"fast.blocks.{i}."
        # step sizes log-uniform in [0.05, 0.5] before the softplus
        dt0 = np.exp(rng.uniform(np.log(0.05), np.log(0.5), D))
        p.update(
            {
                k + "ln1.gain": np.ones(D, dt),
                k + "ln1.shift": np.zeros(D, dt),
                k + "dw.weight": w(D, 1, 3, 3, fan_in=9),
                k + "dw.bias": np.zeros(D, dt),
                k + "ln2.gain": np.ones(D, dt),
                k + "ln2.shift": np.zeros(D, dt),
                k + "ln3.gain": np.ones(D, dt),
                k + "ln3.shift": np.zeros(D, dt),
                k + "attn.q": w(D, D, 1, 1, fan_in=D),
                k + "attn.k": w(D, D, 1, 1, fan_in=D),
                k + "attn.v": w(D, D, 1, 1, fan_in=D),
                k + "attn.o": w(D, D, 1, 1, fan_in=D) * 0.5,
                k + "delta.weight": w(D, D, 1, 1, fan_in=D) * 0.1,
                k + "delta.bias": np.log(np.expm1(dt0)).astype(dt),
                k + "b.weight": w(Ds, D, 1, 1, fan_in=D),
                k + "b.bias": np.zeros(Ds, dt),
                k + "c.weight": w(Ds, D, 1, 1, fan_in=D),
                k + "c.bias": np.zeros(Ds, dt),
                k + "a_base": np.log(np.tile(np.arange(1, Ds + 1, dtype=np.float64), (D, 1))).astype(dt),
                k + "d_skip": np.ones(D, dt),
            }
        )
        if r > 0:
            p[k + "lr_u"] = w(D * Ds, r, fan_in=r) * 0.1
            p[k + "lr_v"] = w(D, r, fan_in=D)
    p["fast.head.weight"] = w(1, D, 1, 1, fan_in=D)
    p["fast.head.bias"] = np.zeros(1, dt)
    if cfg.memory:
        p.update(DeepOptimizer2D.init_params(D, rng, dt))
    return p


class NestS6:
    """Patch forecaster with an optional nested memory path."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        if params is None:
            params = init_params(cfg, np.random.default_rng(seed))
        expected = set(init_params(cfg, np.random.default_rng(0)))
        if set(params) != expected:
            missing, extra = expected - set(params), set(params) - expected
            raise ValueError(f"parameter set mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        self.params: dict[str, Tensor] = {k: T.parameter(v, name=k) for k, v in params.items()}
        self.slow = DeepOptimizer2D(self.params) if cfg.memory else None

    # -- parameter plumbing -------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    def checksum(self) -> int:
        return hash(tuple(v.data.tobytes() for v in self.params.values()))

    def new_memory(self, batch: int, mode: MemoryMode = MemoryMode.TEACHER_FORCED) -> MemoryState:
        return MemoryState.zeros(batch, self.cfg.channels, self.cfg.patch_h, self.cfg.patch_w, mode)

    # -- pieces --------------------------------------------------------
    def stem_forward(self, u: np.ndarray | Tensor) -> Tensor:
        """[N, 2, H, W] -> [N, D, H, W] with shared 3x3 weights."""
        u = u if isinstance(u, Tensor) else Tensor(np.asarray(u, dtype=T.get_default_dtype()))
        p = self.params
        return T.silu(T.conv2d(u, p["fast.stem.weight"], padding=1) + p["fast.stem.bias"].reshape(1, -1, 1, 1))

    def local_mix(self, z: Tensor, block: int) -> Tensor:
        p, k = self.params, f"fast.blocks.{block}."
        zn = layer_norm_channels(z, p[k + "ln1.gain"], p[k + "ln1.shift"])
        z = z + T.conv2d(zn, p[k + "dw.weight"], groups=self.cfg.channels, padding=1) + p[k + "dw.bias"].reshape(
            1, -1, 1, 1
        )
        zn = layer_norm_channels(z, p[k + "ln2.gain"], p[k + "ln2.shift"])
        proj = AttentionWeights(p[k + "attn.q"], p[k + "attn.k"], p[k + "attn.v"], p[k + "attn.o"])
        return z + windowed_attention(zn, self.cfg.window_size, proj)

    def predict_params(self, z: Tensor, block: int) -> SsmParams:
        """Coefficients for every row of z [N, D, H, W] at once."""
        p, k = self.params, f"fast.blocks.{block}."
        D, Ds = self.cfg.channels, self.cfg.state_dim
        delta = T.softplus(conv1x1(z, p[k + "delta.weight"], p[k + "delta.bias"])) + self.cfg.delta_min
        b_eff = conv1x1(z, p[k + "b.weight"], p[k + "b.bias"])
        c_eff = conv1x1(z, p[k + "c.weight"], p[k + "c.bias"])
        log_rate = p[k + "a_base"].reshape(1, D, Ds, 1, 1)
        if self.cfg.low_rank > 0:
            pooled = z.mean(axis=(2, 3))  # [N, D]
            mod = (pooled @ p[k + "lr_v"]) @ p[k + "lr_u"].transpose(1, 0)  # [N, D*Ds]
            log_rate = log_rate + mod.reshape(z.shape[0], D, Ds, 1, 1)
        a_eff = -T.exp(log_rate)
        return SsmParams(delta, a_eff, b_eff, c_eff, p[k + "d_skip"])

    def block_forward(self, z: Tensor, block: int, batch: int) -> Tensor:
        n, D, H, W = z.shape
        steps = n // batch
        z = self.local_mix(z, block)
        k = f"fast.blocks.{block}."
        u = layer_norm_channels(z, self.params[k + "ln3.gain"], self.params[k + "ln3.shift"])
        prm = self.predict_params(u, block)

        def time_major(t: Tensor) -> Tensor:
            if t.shape[0] == 1:
                return t.reshape(1, *t.shape)
            t = t.reshape(batch, steps, *t.shape[1:])
            return t.transpose(1, 0, *range(2, t.ndim))

        seq = SsmParams(time_major(prm.delta), time_major(prm.a_eff), time_major(prm.b_eff),
                        time_major(prm.c_eff), prm.d_skip)
        h0 = Tensor(np.zeros((batch, D, self.cfg.state_dim, H, W), dtype=z.dtype))
        y_seq, _ = ssm_scan(time_major(u), seq, h0)
        y = y_seq.transpose(1, 0, 2, 3, 4).reshape(n, D, H, W)
        return z + y

    def _apply_memory(
        self, z: Tensor, batch: int, memory: MemoryState, surprise: np.ndarray | None
    ) -> tuple[Tensor, MemoryState]:
        """Run the memory recurrence across the window's steps and inject it.

        Same arithmetic as calling memory_write (or memory_decay) and
        memory_inject once per step; proposals and gates are computed for all
        steps in one batch since neither depends on the memory itself.
        """
        n, D, H, W = z.shape
        steps = n // batch
        lam = self.slow.decay()
        if memory.mode is MemoryMode.TEACHER_FORCED:
            if surprise is None:
                surprise = np.zeros((batch, 1, H, W), dtype=z.dtype)
            s = np.repeat(np.asarray(surprise, dtype=z.dtype)[:, None], steps, axis=1).reshape(n, 1, H, W)
            proposals = (self.slow.propose(z, Tensor(s)) * (1 - lam)).reshape(batch, steps, D, H, W)
        m = memory.m
        trace = []
        for t in range(steps):
            m = lam * m + proposals[:, t] if memory.mode is MemoryMode.TEACHER_FORCED else lam * m
            trace.append(m)
        gated = self.slow.gate(z) * T.stack(trace, axis=1).reshape(n, D, H, W)
        return z + gated, MemoryState(m, memory.mode)

    # -- full pipeline -------------------------------------------------
    def forward(
        self,
        x_seq: np.ndarray,
        memory: MemoryState | None = None,
        surprise: np.ndarray | None = None,
    ) -> tuple[Tensor, MemoryState | None]:
        """Predict the next patch for a batch of windows.

        x_seq: [B, T, H_p, W_p] normalized frames. ``memory=None`` skips the
        memory path entirely. Returns ([B, H_p, W_p] prediction, new memory).
        """
        x = np.asarray(x_seq, dtype=T.get_default_dtype())
        if x.ndim == 3:
            x = x[None]
        B, steps, H, W = x.shape
        if (H, W) != (self.cfg.patch_h, self.cfg.patch_w):
            raise ValueError(f"input patch {H}x{W} does not match model patch {self.cfg.patch_h}x{self.cfg.patch_w}")
        u = build_input(x).reshape(B * steps, 2, H, W)
        z = self.stem_forward(u)
        if memory is not None:
            if self.slow is None:
                raise ValueError("this model was built without the memory path")
            z, memory = self._apply_memory(z, B, memory, surprise)
        for i in range(self.cfg.n_blocks):
            z = self.block_forward(z, i, B)
        p = self.params
        y = conv1x1(z, p["fast.head.weight"], p["fast.head.bias"]).reshape(B, steps, H, W)
        return y[:, steps - 1], memory

    def predict_patch(self, window: PatchWindow, memory: MemoryState | None = None) -> np.ndarray:
        y, _ = self.forward(window.x_seq[None], memory)
        return y.data[0]
