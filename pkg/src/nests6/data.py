"""Grid series I/O, normalization, patch tiling, windowing, synthesis and drift."""

from __future__ import annotations

import csv
import enum
import struct
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import PatchWindow

SERIES_MAGIC = b"GRIDSER1"
_HEADER = struct.Struct("<8sIIIIq")  # magic, N, H, W, dt_minutes, origin timestamp
NO_TIMESTAMP = -1


class SeriesFormatError(ValueError):
    pass


@dataclass
class GridSeries:
    frames: np.ndarray  # [N, H, W] float32
    dt_minutes: int = 10
    origin_timestamp: int | None = None  # unix seconds

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be [N, H, W], got shape {self.frames.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape  # type: ignore[return-value]


# ----------------------------------------------------------------------
# file formats
# ----------------------------------------------------------------------
def series_to_bytes(series: GridSeries) -> bytes:
    N, H, W = series.shape
    ts = NO_TIMESTAMP if series.origin_timestamp is None else int(series.origin_timestamp)
    head = _HEADER.pack(SERIES_MAGIC, N, H, W, int(series.dt_minutes), ts)
    return head + np.ascontiguousarray(series.frames, dtype="<f4").tobytes()


def series_from_bytes(buf: bytes) -> GridSeries:
    if len(buf) < _HEADER.size:
        raise SeriesFormatError(f"file too short for a header ({len(buf)} < {_HEADER.size} bytes)")
    magic, N, H, W, dt, ts = _HEADER.unpack_from(buf)
    if magic != SERIES_MAGIC:
        raise SeriesFormatError(f"bad magic {magic!r}, expected {SERIES_MAGIC!r}")
    need = N * H * W * 4
    have = len(buf) - _HEADER.size
    if have < need:
        raise SeriesFormatError(f"truncated payload: header declares {N}x{H}x{W} frames ({need} bytes), found {have}")
    if have > need:
        raise SeriesFormatError(f"{have - need} unexpected trailing bytes after {N} frames")
    frames = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(N, H, W).astype(np.float32)
    if not np.all(np.isfinite(frames)):
        bad = int(np.argwhere(~np.isfinite(frames))[0][0])
        raise SeriesFormatError(f"non-finite values in frame {bad}")
    return GridSeries(frames, dt, None if ts == NO_TIMESTAMP else ts)


def save_series(series: GridSeries, path: str | Path) -> None:
    Path(path).write_bytes(series_to_bytes(series))


def load_series(path: str | Path) -> GridSeries:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return load_csv(path)
    return series_from_bytes(path.read_bytes())


def load_csv(path: str | Path, shape: tuple[int, int, int] | None = None, dt_minutes: int = 10) -> GridSeries:
    """Read long-format ``t,row,col,value`` rows; missing cells become 0."""
    rows: list[tuple[int, int, int, float]] = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].strip().startswith("#"):
                continue
            try:
                t, r, c, v = int(rec[0]), int(rec[1]), int(rec[2]), float(rec[3])
            except ValueError:
                if not rows:
                    continue  # header line
                raise SeriesFormatError(f"malformed CSV row: {rec}") from None
            rows.append((t, r, c, v))
    if not rows:
        raise SeriesFormatError(f"no data rows in {path}")
    arr = np.array(rows, dtype=np.float64)
    idx = arr[:, :3].astype(np.int64)
    if np.any(idx < 0):
        raise SeriesFormatError("negative t/row/col index in CSV")
    if shape is None:
        shape = tuple(int(m) + 1 for m in idx.max(axis=0))  # type: ignore[assignment]
    frames = np.zeros(shape, dtype=np.float32)
    frames[idx[:, 0], idx[:, 1], idx[:, 2]] = arr[:, 3]
    if not np.all(np.isfinite(frames)):
        raise SeriesFormatError("non-finite values in CSV")
    return GridSeries(frames, dt_minutes)


# ----------------------------------------------------------------------
# normalization
# ----------------------------------------------------------------------
@dataclass
class Normalizer:
    """Global z-score with statistics from the training split."""

    mean: float
    std: float

    def __post_init__(self) -> None:
        if not self.std > 0:
            raise ValueError(f"normalizer std must be positive, got {self.std}")

    @classmethod
    def fit(cls, frames: np.ndarray) -> Normalizer:
        x = np.asarray(frames, dtype=np.float64)
        std = float(x.std())
        return cls(float(x.mean()), std if std > 0 else 1.0)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


# ----------------------------------------------------------------------
# patches
# ----------------------------------------------------------------------
def _check_tiling(H: int, W: int, hp: int, wp: int) -> None:
    if hp < 1 or wp < 1 or H % hp or W % wp:
        raise ValueError(f"frame {H}x{W} cannot be tiled by {hp}x{wp} patches")


def patch_origins(H: int, W: int, hp: int, wp: int) -> list[tuple[int, int]]:
    _check_tiling(H, W, hp, wp)
    return [(r, c) for r in range(0, H, hp) for c in range(0, W, wp)]


def tile_patches(frame: np.ndarray, hp: int, wp: int) -> list[tuple[tuple[int, int], np.ndarray]]:
    """Non-overlapping patches with stride equal to the patch size, row-major."""
    H, W = frame.shape[-2:]
    return [((r, c), frame[..., r : r + hp, c : c + wp].copy()) for r, c in patch_origins(H, W, hp, wp)]


def stitch_patches(patches: list[tuple[tuple[int, int], np.ndarray]], H: int, W: int) -> np.ndarray:
    if not patches:
        raise ValueError("no patches to stitch")
    lead = patches[0][1].shape[:-2]
    out = np.zeros((*lead, H, W), dtype=patches[0][1].dtype)
    cover = np.zeros((H, W), dtype=np.int32)
    for (r, c), p in patches:
        hp, wp = p.shape[-2:]
        if r < 0 or c < 0 or r + hp > H or c + wp > W:
            raise ValueError(f"patch at {(r, c)} of size {hp}x{wp} falls outside the {H}x{W} frame")
        out[..., r : r + hp, c : c + wp] = p
        cover[r : r + hp, c : c + wp] += 1
    if np.any(cover > 1):
        raise ValueError(f"patches overlap on {int(np.sum(cover > 1))} cells")
    if np.any(cover == 0):
        raise ValueError(f"patches leave {int(np.sum(cover == 0))} cells uncovered")
    return out


def patchify(frames: np.ndarray, hp: int, wp: int) -> np.ndarray:
    """[..., H, W] -> [L, ..., hp, wp] with locations in row-major origin order."""
    H, W = frames.shape[-2:]
    _check_tiling(H, W, hp, wp)
    lead = frames.shape[:-2]
    x = frames.reshape(*lead, H // hp, hp, W // wp, wp)
    n = len(lead)
    x = np.moveaxis(x, (n, n + 2), (0, 1))  # nh, nw, ..., hp, wp
    return x.reshape(-1, *lead, hp, wp)


def unpatchify(patches: np.ndarray, H: int, W: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    L, *lead, hp, wp = patches.shape
    _check_tiling(H, W, hp, wp)
    nh, nw = H // hp, W // wp
    if L != nh * nw:
        raise ValueError(f"expected {nh * nw} patches for a {H}x{W} frame, got {L}")
    x = patches.reshape(nh, nw, *lead, hp, wp)
    n = len(lead)
    x = np.moveaxis(x, (0, 1), (n, n + 2))
    return x.reshape(*lead, H, W)


# ----------------------------------------------------------------------
# windows and splits
# ----------------------------------------------------------------------
def split_bounds(n_frames: int, train_frac: float = 0.7, val_frac: float = 0.1) -> tuple[int, int]:
    """Frame indices where validation and test begin."""
    if not (0 < train_frac < 1 and 0 <= val_frac < 1 and train_frac + val_frac < 1):
        raise ValueError(f"bad split fractions train={train_frac} val={val_frac}")
    n_train = int(round(n_frames * train_frac))
    n_val = int(round(n_frames * val_frac))
    return n_train, n_train + n_val


@dataclass
class WindowArrays:
    """Windows grouped by patch location, chronological within each location.

    x: [L, n, T, hp, wp] inputs; y: [L, n, hp, wp] targets; target_index: [n]
    frame index of each target.
    """

    x: np.ndarray
    y: np.ndarray
    target_index: np.ndarray
    origins: list[tuple[int, int]]

    @property
    def n(self) -> int:
        return self.x.shape[1]


def window_arrays(
    inputs: np.ndarray,
    seq_len: int,
    hp: int,
    wp: int,
    start: int,
    stop: int,
    targets: np.ndarray | None = None,
) -> WindowArrays:
    """Windows whose target frame index lies in [start, stop).

    ``inputs`` and ``targets`` are [N, H, W] frame stacks; targets default to
    the inputs (they differ only when evaluating under input drift).
    """
    targets = inputs if targets is None else targets
    N, H, W = inputs.shape
    start = max(start, seq_len)
    stop = min(stop, N)
    if stop <= start:
        raise ValueError(f"no windows with targets in [{start}, {stop}) for N={N}, T={seq_len}")
    tgt = np.arange(start, stop)
    views = sliding_window_view(inputs, seq_len, axis=0)  # [N-T+1, H, W, T]
    x = np.moveaxis(views[tgt - seq_len], -1, 1)  # [n, T, H, W]
    return WindowArrays(
        x=patchify(np.ascontiguousarray(x), hp, wp),
        y=patchify(targets[tgt], hp, wp),
        target_index=tgt,
        origins=patch_origins(H, W, hp, wp),
    )


def make_windows(
    series: GridSeries, seq_len: int, hp: int, wp: int
) -> Iterator[tuple[PatchWindow, np.ndarray, int]]:
    """Yield (window, target patch, target frame index) per location, chronologically."""
    N = series.frames.shape[0]
    if N < seq_len + 1:
        raise ValueError(f"need at least T+1={seq_len + 1} frames, got {N}")
    wa = window_arrays(series.frames, seq_len, hp, wp, seq_len, N)
    for loc, origin in enumerate(wa.origins):
        for i, t in enumerate(wa.target_index):
            yield PatchWindow(wa.x[loc, i], origin), wa.y[loc, i], int(t)


# ----------------------------------------------------------------------
# synthetic traffic
# ----------------------------------------------------------------------
@dataclass
class SynthConfig:
    H: int = 20
    W: int = 20
    N: int = 2000
    diurnal_period_steps: int = 144
    n_hotspots: int = 6
    diffusion_coefficient: float = 0.2
    diffusion_steps: int = 10
    noise_std: float = 0.15
    peak: float = 100.0
    regime_change_at: int = 0  # frame index; 0 disables
    regime_gain: float = 1.5
    seed: int = 0


MAX_DIFFUSION_COEFFICIENT = 0.25  # explicit 5-point scheme, unit grid spacing


def laplacian_5pt(u: np.ndarray) -> np.ndarray:
    """Zero-padded 5-point Laplacian over the last two axes."""
    p = np.pad(u, [(0, 0)] * (u.ndim - 2) + [(1, 1), (1, 1)])
    return p[..., :-2, 1:-1] + p[..., 2:, 1:-1] + p[..., 1:-1, :-2] + p[..., 1:-1, 2:] - 4 * u


def synth_generate(cfg: SynthConfig) -> GridSeries:
    """Diurnal hotspots spread by explicit diffusion, with log-normal noise."""
    if min(cfg.H, cfg.W, cfg.N, cfg.diurnal_period_steps) < 1 or cfg.n_hotspots < 0:
        raise ValueError(f"invalid synthetic config: {cfg}")
    if not 0 <= cfg.diffusion_coefficient <= MAX_DIFFUSION_COEFFICIENT:
        raise ValueError(
            f"diffusion_coefficient={cfg.diffusion_coefficient} is unstable for the explicit "
            f"5-point scheme; it must satisfy 0 <= k <= {MAX_DIFFUSION_COEFFICIENT}"
        )
    rng = np.random.default_rng(cfg.seed)
    K = cfg.n_hotspots
    rows = rng.integers(0, cfg.H, K)
    cols = rng.integers(0, cfg.W, K)
    amps = cfg.peak * rng.uniform(0.4, 1.0, K)
    phases = rng.normal(0.0, 0.4, K)
    t = np.arange(cfg.N)[:, None]
    level = amps * (1 + 0.8 * np.sin(2 * np.pi * t / cfg.diurnal_period_steps + phases))  # [N, K]
    if cfg.regime_change_at > 0:
        level[cfg.regime_change_at :] *= cfg.regime_gain

    field = np.zeros((cfg.N, cfg.H, cfg.W))
    for k in range(K):
        field[:, rows[k], cols[k]] += level[:, k]
    for _ in range(cfg.diffusion_steps):
        field += cfg.diffusion_coefficient * laplacian_5pt(field)
    if K:
        field += 0.02 * amps.mean()  # faint city-wide floor

    if cfg.noise_std > 0:
        eps = rng.standard_normal(field.shape)
        field *= np.exp(cfg.noise_std * eps - 0.5 * cfg.noise_std**2)
    np.maximum(field, 0, out=field)
    return GridSeries(field.astype(np.float32), dt_minutes=10)


# ----------------------------------------------------------------------
# drift
# ----------------------------------------------------------------------
class DriftKind(str, enum.Enum):
    NONE = "none"
    SCALE_OFFSET = "scale_offset"
    SPATIAL_SHIFT = "spatial_shift"
    VOLATILITY = "volatility"


@dataclass
class DriftSpec:
    kind: DriftKind = DriftKind.NONE
    alpha: float = 1.25
    beta: float = 0.25
    k: int = 5
    sigma: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        self.kind = DriftKind(self.kind)


def shift_frames(x: np.ndarray, k: int) -> np.ndarray:
    """Translate the last two axes by (+k, +k) cells, filling with zeros."""
    H, W = x.shape[-2:]
    if abs(k) >= min(H, W):
        raise ValueError(f"shift of {k} cells is not smaller than the {H}x{W} frame")
    out = np.zeros_like(x)
    if k >= 0:
        out[..., k:, k:] = x[..., : H - k, : W - k]
    else:
        out[..., : H + k, : W + k] = x[..., -k:, -k:]
    return out


def drift_apply(x: np.ndarray, spec: DriftSpec) -> np.ndarray:
    """Apply an inference-time input transform to normalized frames [..., H, W]."""
    x = np.asarray(x)
    if spec.kind is DriftKind.NONE:
        return x.copy()
    if spec.kind is DriftKind.SCALE_OFFSET:
        return (spec.alpha * x + spec.beta).astype(x.dtype, copy=False)
    if spec.kind is DriftKind.SPATIAL_SHIFT:
        return shift_frames(x, spec.k) if spec.k else x.copy()
    noise = np.random.default_rng(spec.seed).standard_normal(x.shape) * spec.sigma
    return (x + noise).astype(x.dtype, copy=False)
