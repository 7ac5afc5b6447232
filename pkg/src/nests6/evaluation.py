"""Metrics, teacher-forced streams, autoregressive rollouts, drift tests, MACs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .data import (
    DriftKind,
    DriftSpec,
    Normalizer,
    WindowArrays,
    drift_apply,
    patch_origins,
    patchify,
    window_arrays,
)
from .memory import MemoryMode, MemoryState, compute_surprise
from .model import ModelConfig, PatchWindow
from .tensor import Tensor

REPORT_COLUMNS = ["run_id", "split", "horizon", "drift_kind", "memory", "mae", "rmse", "n"]


class Forecaster(Protocol):
    slow: object | None

    def forward(
        self, x_seq: np.ndarray, memory: MemoryState | None = None, surprise: np.ndarray | None = None
    ) -> tuple[Tensor, MemoryState | None]: ...


class PersistenceModel:
    """Predicts that the next patch equals the last observed one."""

    slow = None

    def forward(self, x_seq, memory=None, surprise=None):
        return Tensor(np.asarray(x_seq)[:, -1].copy()), memory


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------
@dataclass
class MetricReport:
    mae: float
    rmse: float
    horizon: int = 1
    n_samples: int = 0
    drift: DriftSpec | None = None
    memory_enabled: bool = True

    def __post_init__(self) -> None:
        assert self.rmse >= self.mae * (1 - 1e-12) - 1e-12 >= -1e-12, (self.mae, self.rmse)

    @property
    def drift_kind(self) -> str:
        return self.drift.kind.value if self.drift else DriftKind.NONE.value


def mae_rmse(
    preds: np.ndarray,
    targets: np.ndarray,
    norm: Normalizer,
    horizon: int = 1,
    drift: DriftSpec | None = None,
    memory_enabled: bool = True,
) -> MetricReport:
    """MAE and RMSE in raw units after undoing the z-score."""
    p, t = np.asarray(preds), np.asarray(targets)
    if p.size == 0:
        raise ValueError("cannot score an empty prediction set")
    if p.shape != t.shape:
        raise ValueError(f"predictions {p.shape} and targets {t.shape} differ")
    d = norm.invert(p) - norm.invert(t)
    mae = float(np.mean(np.abs(d)))
    rmse = float(np.sqrt(np.mean(d * d)))
    n = p.shape[0] * p.shape[1] if p.ndim >= 4 else p.shape[0]
    return MetricReport(mae, rmse, horizon, int(n), drift, memory_enabled)


def per_pixel_rmse_map(preds: np.ndarray, targets: np.ndarray, norm: Normalizer) -> np.ndarray:
    """Per-cell RMSE over the leading (time) axis of full-grid [n, H, W] stacks."""
    d = norm.invert(preds) - norm.invert(targets)
    return np.sqrt(np.mean(d * d, axis=0))


# ----------------------------------------------------------------------
# one-step evaluation
# ----------------------------------------------------------------------
@dataclass
class StreamResult:
    preds: np.ndarray  # [L, n, hp, wp]
    memory_after: np.ndarray | None  # [L, n, D, hp, wp]; state after each window
    report: MetricReport


def evaluate_one_step(
    model: Forecaster,
    windows: WindowArrays,
    norm: Normalizer,
    memory_enabled: bool = True,
    drift: DriftSpec | None = None,
) -> StreamResult:
    """Teacher-forced pass over every location's stream, in time order.

    With memory enabled each window writes to the location's memory using the
    surprise of the previous window's prediction; the first window sees zero
    surprise and zero memory.
    """
    L, n = windows.x.shape[:2]
    use_memory = memory_enabled and model.slow is not None
    preds = np.empty(windows.y.shape, dtype=windows.x.dtype)
    mem_trace = None
    memory = None
    if use_memory:
        memory = model.new_memory(L)
        mem_trace = np.empty((L, n, *memory.m.shape[1:]), dtype=memory.m.dtype)
    for i in range(n):
        surprise = None
        if use_memory:
            if i == 0:
                surprise = np.zeros((L, 1, *windows.y.shape[2:]), dtype=memory.m.dtype)
            else:
                surprise = compute_surprise(preds[:, i - 1], windows.y[:, i - 1]).astype(memory.m.dtype)
            memory = memory.detached(MemoryMode.TEACHER_FORCED)
        out, memory = model.forward(windows.x[:, i], memory, surprise)
        preds[:, i] = out.data
        if use_memory:
            mem_trace[:, i] = memory.m.data
    report = mae_rmse(preds, windows.y, norm, 1, drift, use_memory)
    return StreamResult(preds, mem_trace, report)


# ----------------------------------------------------------------------
# rollouts
# ----------------------------------------------------------------------
@dataclass
class RolloutTrace:
    reports: list[MetricReport]
    preds: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def delta_mae(self) -> float:
        return self.reports[-1].mae - self.reports[0].mae

    @property
    def delta_rmse(self) -> float:
        return self.reports[-1].rmse - self.reports[0].rmse


def _free_run(
    model: Forecaster, window: np.ndarray, first_pred: np.ndarray, memory: np.ndarray | None, steps: int
) -> list[np.ndarray]:
    """Continue a rollout for ``steps`` more horizons from a batch of windows."""
    out = []
    pred = first_pred
    mem = None if memory is None else MemoryState(Tensor(memory), MemoryMode.FREE_RUNNING)
    for _ in range(steps):
        window = np.concatenate([window[:, 1:], pred[:, None].astype(window.dtype)], axis=1)
        y, mem = model.forward(window, mem)
        pred = y.data
        out.append(pred)
    return out


def rollout(
    model: Forecaster,
    seed_window: PatchWindow | np.ndarray,
    truth: np.ndarray,
    norm: Normalizer | None = None,
    memory: MemoryState | None = None,
    surprise: np.ndarray | None = None,
    horizon: int | None = None,
) -> RolloutTrace:
    """Feed predictions back for ``horizon`` steps from a single seed window.

    The first step may write to memory if ``memory`` is teacher-forced (its
    surprise comes from history inside the seed); later steps only decay it.
    """
    x = seed_window.x_seq if isinstance(seed_window, PatchWindow) else np.asarray(seed_window)
    horizon = horizon or truth.shape[0]
    if truth.shape[0] < horizon:
        raise ValueError(f"rollout of {horizon} steps needs {horizon} truth frames, got {truth.shape[0]}")
    norm = norm or Normalizer(0.0, 1.0)
    y, mem = model.forward(x[None], memory, surprise)
    first = y.data
    preds = [first] + _free_run(model, x[None], first, None if mem is None else mem.m.data, horizon - 1)
    reports = [
        mae_rmse(p, truth[h][None], norm, h + 1, memory_enabled=memory is not None) for h, p in enumerate(preds)
    ]
    return RolloutTrace(reports, [p[0] for p in preds])


def rollout_eval(
    model: Forecaster,
    inputs: np.ndarray,
    targets: np.ndarray,
    start: int,
    stop: int,
    norm: Normalizer,
    seq_len: int,
    patch: tuple[int, int],
    horizon: int = 6,
    memory_enabled: bool = True,
    drift: DriftSpec | None = None,
    chunk: int = 256,
) -> RolloutTrace:
    """Rollouts from every origin whose first target lies in [start, stop).

    Horizon 1 is the teacher-forced one-step pass itself, so its metrics are
    the single-step metrics. From horizon 2 on the memory runs free (decay
    only). Horizon h is scored on the origins with a true frame h-1 steps
    past their first target.
    """
    windows = window_arrays(inputs, seq_len, patch[0], patch[1], start, stop, targets)
    one = evaluate_one_step(model, windows, norm, memory_enabled, drift)
    L, n = windows.x.shape[:2]
    N = targets.shape[0]
    tgt = windows.target_index
    flat_x = windows.x.reshape(L * n, *windows.x.shape[2:])
    flat_p = one.preds.reshape(L * n, *one.preds.shape[2:])
    flat_m = None if one.memory_after is None else one.memory_after.reshape(L * n, *one.memory_after.shape[2:])
    later: list[list[np.ndarray]] = [[] for _ in range(horizon - 1)]
    for a in range(0, L * n, chunk):
        b = min(a + chunk, L * n)
        steps = _free_run(model, flat_x[a:b], flat_p[a:b], None if flat_m is None else flat_m[a:b], horizon - 1)
        for h, p in enumerate(steps):
            later[h].append(p)
    preds = [one.preds] + [np.concatenate(ps).reshape(L, n, *windows.y.shape[2:]) for ps in later]
    reports = [one.report]
    for h in range(2, horizon + 1):
        ok = tgt + h - 1 < N
        if not ok.any():
            raise ValueError(f"no truth available for horizon {h}")
        truth = patchify(targets[tgt[ok] + h - 1], *patch)
        reports.append(mae_rmse(preds[h - 1][:, ok], truth, norm, h, drift, one.report.memory_enabled))
    return RolloutTrace(reports, preds)


# ----------------------------------------------------------------------
# drift stress tests
# ----------------------------------------------------------------------
def drift_eval(
    model: Forecaster,
    frames: np.ndarray,
    spec: DriftSpec,
    memory_enabled: bool,
    start: int,
    stop: int,
    norm: Normalizer,
    seq_len: int,
    patch: tuple[int, int],
    shifted_targets: bool = False,
) -> MetricReport:
    """One-step MAE/RMSE with the drift applied to the (normalized) inputs.

    Targets stay clean unless ``shifted_targets`` is set for spatial shifts.
    Turning memory off removes injection and writes altogether.
    """
    inputs = drift_apply(frames, spec)
    targets = frames
    if shifted_targets and spec.kind is DriftKind.SPATIAL_SHIFT:
        targets = inputs
    windows = window_arrays(inputs, seq_len, patch[0], patch[1], start, stop, targets)
    return evaluate_one_step(model, windows, norm, memory_enabled, spec).report


# ----------------------------------------------------------------------
# reports and heatmaps
# ----------------------------------------------------------------------
def report_row(run_id: str, split: str, rep: MetricReport) -> dict[str, object]:
    return {
        "run_id": run_id,
        "split": split,
        "horizon": rep.horizon,
        "drift_kind": rep.drift_kind,
        "memory": "on" if rep.memory_enabled else "off",
        "mae": f"{rep.mae:.6f}",
        "rmse": f"{rep.rmse:.6f}",
        "n": rep.n_samples,
    }


def write_report(path: str | Path, rows: list[dict[str, object]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def write_pgm(values: np.ndarray, path: str | Path) -> float:
    """16-bit binary PGM scaled linearly from [0, max]; max goes to a sidecar."""
    v = np.asarray(values, dtype=np.float64)
    vmax = float(v.max()) if v.size else 0.0
    scaled = np.zeros(v.shape) if vmax <= 0 else np.clip(v / vmax, 0, 1) * 65535
    pix = np.rint(scaled).astype(">u2")
    H, W = v.shape
    path = Path(path)
    path.write_bytes(f"P5\n{W} {H}\n65535\n".encode("ascii") + pix.tobytes())
    path.with_suffix(".max.txt").write_text(f"{vmax!r}\n")
    return vmax


def read_pgm(path: str | Path) -> tuple[np.ndarray, float]:
    """Decode a map written by :func:`write_pgm` back to raw units."""
    path = Path(path)
    raw = path.read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    W, H = map(int, parts[1].split())
    maxval = int(parts[2])
    pix = np.frombuffer(parts[3], dtype=">u2").reshape(H, W)
    vmax = float(path.with_suffix(".max.txt").read_text())
    return pix.astype(np.float64) / maxval * vmax, vmax


# ----------------------------------------------------------------------
# MAC accounting
# ----------------------------------------------------------------------
@dataclass
class MacCount:
    """MACs for one full-grid reconstruction.

    ``layers`` lists per-layer counts already multiplied by the number of
    patches and time steps. Elementwise products count one MAC each;
    exp/sigmoid/softplus/tanh/rsqrt evaluations are tallied separately.
    """

    layers: list[tuple[str, int]]
    transcendental: int
    n_patches: int
    seq_len: int

    @property
    def total(self) -> int:
        return sum(m for _, m in self.layers)


def conv_macs(cin: int, cout: int, k: int, pixels: int, groups: int = 1) -> int:
    return cout * pixels * (cin // groups) * k * k


def _per_patch_step(cfg: ModelConfig) -> tuple[list[tuple[str, int]], int]:
    D, Ds, r, w = cfg.channels, cfg.state_dim, cfg.low_rank, cfg.window_size
    P = cfg.patch_h * cfg.patch_w
    layers = [("stem.conv3x3", conv_macs(2, D, 3, P))]
    trans = D * P  # stem SiLU
    if cfg.memory:
        layers += [
            ("slow.phi1", conv_macs(D + 1, D, 1, P)),
            ("slow.phi2", conv_macs(D, D, 1, P)),
            ("slow.write", 2 * D * P),
            ("slow.gate", conv_macs(D, D, 1, P)),
            ("slow.inject", D * P),
        ]
        trans += 3 * D * P  # SiLU, tanh, gate sigmoid
    for i in range(cfg.n_blocks):
        k = f"block{i}."
        layers += [
            (k + "ln1", 4 * D * P),
            (k + "dwconv3x3", conv_macs(D, D, 3, P, groups=D)),
            (k + "ln2", 4 * D * P),
            (k + "attn.qkv", 3 * conv_macs(D, D, 1, P)),
            (k + "attn.scores", P * w * w * D),
            (k + "attn.mix", P * w * w * D),
            (k + "attn.out", conv_macs(D, D, 1, P)),
            (k + "ln3", 4 * D * P),
            (k + "params.delta", conv_macs(D, D, 1, P)),
            (k + "params.b", conv_macs(D, Ds, 1, P)),
            (k + "params.c", conv_macs(D, Ds, 1, P)),
        ]
        if r > 0:
            layers.append((k + "params.low_rank", D * P + D * r + D * Ds * r))
        layers += [
            (k + "scan", 5 * D * Ds * P),
            (k + "skip", D * P),
        ]
        trans += 3 * P + P * w * w + D * P + D * Ds + D * Ds * P  # rsqrt x3, softmax, softplus, a_eff, decay
    layers.append(("head.conv1x1", conv_macs(D, 1, 1, P)))
    return layers, trans


def count_macs(cfg: ModelConfig, grid_h: int, grid_w: int, seq_len: int | None = None) -> MacCount:
    """Analytic MACs for predicting a full grid patch by patch (batch 1)."""
    n_patches = len(patch_origins(grid_h, grid_w, cfg.patch_h, cfg.patch_w))
    steps = seq_len or cfg.seq_len
    layers, trans = _per_patch_step(cfg)
    scale = n_patches * steps
    return MacCount([(name, m * scale) for name, m in layers], trans * scale, n_patches, steps)


def write_mac_ledger(mc: MacCount, path: str | Path) -> str:
    rows = [("layer", "macs")] + [(n, str(m)) for n, m in mc.layers] + [("total", str(mc.total))]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows + [("transcendental_ops", str(mc.transcendental))])
    width = max(len(n) for n, _ in rows)
    lines = [f"{n:<{width}}  {m:>14}" for n, m in rows]
    lines.append(f"{'transcendental_ops':<{width}}  {mc.transcendental:>14}")
    lines.append(f"patches={mc.n_patches} T={mc.seq_len}")
    return "\n".join(lines)
