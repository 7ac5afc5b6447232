"""One-step-ahead training with SmoothL1 + Laplacian smoothness penalty."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Normalizer, WindowArrays
from .memory import MemoryMode, MemoryState, compute_surprise
from .model import NestS6
from .optim import Adam, clip_grad_norm
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "step", "train_loss", "val_mae", "val_rmse", "lr", "skipped_steps"]


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    laplacian_weight: float = 0.1
    smooth_l1_beta: float = 1.0
    grad_clip_norm: float = 1.0
    patience: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.laplacian_weight < 0:
            raise ValueError("laplacian_weight must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


def smooth_l1(pred: Tensor, target: Tensor | np.ndarray, beta: float = 1.0) -> Tensor:
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != tgt.shape:
        raise ValueError(f"prediction {pred.shape} and target {tgt.shape} differ")
    d = pred - tgt
    quad = (np.abs(d.data) < beta).astype(pred.dtype)
    elem = d * d * (0.5 / beta) * quad + (T.tabs(d) - 0.5 * beta) * (1 - quad)
    return elem.mean()


def laplacian_penalty(pred: Tensor) -> Tensor:
    """Mean squared 5-point Laplacian response over interior pixels.

    Border pixels are skipped so zero padding is never penalized; patches
    without an interior (fewer than 3 rows or columns) score zero.
    """
    H, W = pred.shape[-2:]
    if H < 3 or W < 3:
        return Tensor(np.zeros((), dtype=pred.dtype))
    c = pred[..., 1:-1, 1:-1]
    lap = pred[..., :-2, 1:-1] + pred[..., 2:, 1:-1] + pred[..., 1:-1, :-2] + pred[..., 1:-1, 2:] - 4.0 * c
    return (lap * lap).mean()


def training_loss(pred: Tensor, target: np.ndarray, cfg: TrainConfig) -> Tensor:
    loss = smooth_l1(pred, target, cfg.smooth_l1_beta)
    if cfg.laplacian_weight > 0:
        loss = loss + cfg.laplacian_weight * laplacian_penalty(pred)
    return loss


# ----------------------------------------------------------------------
# chronological streams
# ----------------------------------------------------------------------
@dataclass
class Stream:
    location: int
    start: int
    length: int
    memory: np.ndarray | None = None
    prev_pred: np.ndarray | None = None


def make_streams(n_locations: int, n_samples: int, batch_size: int) -> list[Stream]:
    """Split every location's chronology into contiguous chunks.

    Enough chunks are cut that one step can draw ``batch_size`` samples, each
    from a different stream; within a stream samples stay in time order.
    """
    chunks = max(1, batch_size // max(n_locations, 1))
    length = n_samples // chunks
    if length < 1:
        raise ValueError(f"{n_samples} samples cannot fill {chunks} streams per location")
    return [Stream(loc, c * length, length) for loc in range(n_locations) for c in range(chunks)]


@dataclass
class EpochResult:
    train_loss: float
    steps: int
    skipped_steps: int
    flagged: bool = False
    step_losses: list[float] = field(default_factory=list)


def train_epoch(model: NestS6, opt: Adam, train: WindowArrays, cfg: TrainConfig) -> EpochResult:
    streams = make_streams(train.x.shape[0], train.n, cfg.batch_size)
    groups = [streams[i : i + cfg.batch_size] for i in range(0, len(streams), cfg.batch_size)]
    names = list(model.params)
    plist = [model.params[k] for k in names]
    use_memory = model.slow is not None
    losses: list[float] = []
    skipped = 0
    for i in range(streams[0].length):
        for group in groups:
            loc = np.array([s.location for s in group])
            idx = np.array([s.start + i for s in group])
            x, y = train.x[loc, idx], train.y[loc, idx]
            memory = surprise = None
            if use_memory:
                if i == 0:
                    m0 = model.new_memory(len(group)).m.data
                    surprise = np.zeros((len(group), 1, *y.shape[1:]), dtype=m0.dtype)
                else:
                    m0 = np.stack([s.memory for s in group])
                    prev = np.stack([s.prev_pred for s in group])
                    surprise = compute_surprise(prev, train.y[loc, idx - 1])
                memory = MemoryState(Tensor(m0), MemoryMode.TEACHER_FORCED)
            with T.Tape() as tape:
                pred, new_mem = model.forward(x, memory, surprise)
                loss = training_loss(pred, y, cfg)
            for j, s in enumerate(group):
                s.prev_pred = pred.data[j]
                if new_mem is not None:
                    s.memory = new_mem.m.data[j]  # carried detached into the next window
            if not math.isfinite(loss.item()):
                skipped += 1
                continue
            raw = T.backprop(tape, loss, plist)
            grads = {k: raw[p] for k, p in zip(names, plist)}
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                skipped += 1
                continue
            clip_grad_norm(grads, cfg.grad_clip_norm)
            opt.step(grads)
            losses.append(loss.item())
    steps = len(losses) + skipped
    flagged = steps > 0 and skipped / steps > 0.01
    if flagged:
        log.warning("epoch skipped %d of %d steps on non-finite loss", skipped, steps)
    return EpochResult(float(np.mean(losses)) if losses else float("nan"), steps, skipped, flagged, losses)


# ----------------------------------------------------------------------
# fit loop
# ----------------------------------------------------------------------
@dataclass
class FitResult:
    best_epoch: int
    best_val_mae: float
    history: list[dict[str, float]] = field(default_factory=list)


def fit(
    model: NestS6,
    train: WindowArrays,
    val: WindowArrays | None,
    norm: Normalizer,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> FitResult:
    """Train with early stopping on validation MAE, restoring the best weights."""
    from .evaluation import evaluate_one_step

    opt = Adam(model.params, lr=cfg.lr)
    best_state = model.state_dict()
    best_mae, best_epoch, stale, step = math.inf, 0, 0, 0
    history: list[dict[str, float]] = []
    fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(LOG_COLUMNS)
    try:
        for epoch in range(1, cfg.epochs + 1):
            res = train_epoch(model, opt, train, cfg)
            step += res.steps
            if val is not None:
                rep = evaluate_one_step(model, val, norm, memory_enabled=model.slow is not None).report
                val_mae, val_rmse = rep.mae, rep.rmse
            else:
                val_mae = val_rmse = float("nan")
            row = {
                "epoch": epoch,
                "step": step,
                "train_loss": res.train_loss,
                "val_mae": val_mae,
                "val_rmse": val_rmse,
                "lr": cfg.lr,
                "skipped_steps": res.skipped_steps,
            }
            history.append(row)
            if writer:
                writer.writerow([row[c] for c in LOG_COLUMNS])
                fh.flush()
            log.info("epoch %d loss %.5f val_mae %.4f", epoch, res.train_loss, val_mae)
            if val is None or val_mae < best_mae:
                best_mae, best_epoch, stale = val_mae, epoch, 0
                best_state = model.state_dict()
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                    break
    finally:
        if fh:
            fh.close()
    model.load_state_dict(best_state)
    return FitResult(best_epoch, best_mae, history)


# ----------------------------------------------------------------------
# gradient verification
# ----------------------------------------------------------------------
@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    checked: int


def grad_check(
    model: NestS6,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig | None = None,
    memory: np.ndarray | None = None,
    surprise: np.ndarray | None = None,
    h: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
) -> GradCheckResult:
    """Compare tape gradients of the training loss with central differences.

    Meant for float64 models. Tensors with more than ``max_coords`` entries
    are checked on a random subsample of max(max_coords, 5%) coordinates.
    """
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(seed)

    def loss_value() -> Tensor:
        mem = None if memory is None else MemoryState(Tensor(memory.copy()), MemoryMode.TEACHER_FORCED)
        pred, _ = model.forward(x, mem, surprise)
        return training_loss(pred, y, cfg)

    names = list(model.params)
    with T.Tape() as tape:
        loss = loss_value()
    grads = T.backprop(tape, loss, [model.params[k] for k in names])
    worst, worst_name, n = 0.0, "", 0
    for name in names:
        p = model.params[name]
        g = grads[p].reshape(-1)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max(max_coords, flat.size // 20), replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value().item()
            flat[i] = orig - h
            down = loss_value().item()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            err = abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-8)
            n += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
    return GradCheckResult(worst, worst_name, n)
