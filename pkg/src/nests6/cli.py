"""``nests6`` command line: synth, train, eval, rollout, drift, macs.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure. Outputs land in ``[run] out_dir`` unless ``NSTS6_OUT`` is set.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import (
    DriftKind,
    DriftSpec,
    GridSeries,
    Normalizer,
    SeriesFormatError,
    WindowArrays,
    drift_apply,
    load_series,
    save_series,
    split_bounds,
    synth_generate,
    unpatchify,
    window_arrays,
)
from .evaluation import (
    PersistenceModel,
    count_macs,
    drift_eval,
    evaluate_one_step,
    per_pixel_rmse_map,
    report_row,
    rollout_eval,
    write_mac_ledger,
    write_pgm,
    write_report,
)
from .model import ModelConfig, NestS6
from .training import fit

log = logging.getLogger("nests6")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "NSTS6_OUT"


class DataError(RuntimeError):
    """Input data that cannot be used for the requested run."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------
# shared plumbing
# ----------------------------------------------------------------------
def out_dir(cfg: RunConfig) -> Path:
    path = Path(os.environ.get(OUT_ENV) or cfg.run.out_dir)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc.strerror}") from None
    return path


def load_frames(cfg: RunConfig, data_path: str | None) -> GridSeries:
    path = data_path or cfg.data.path
    if not path:
        try:
            return synth_generate(cfg.synth)
        except ValueError as exc:
            raise ConfigError(f"[synth]: {exc}") from None
    try:
        return load_series(path)
    except OSError as exc:
        raise DataError(f"cannot read series {path}: {exc.strerror}") from None
    except SeriesFormatError as exc:
        raise DataError(f"{path}: {exc}") from None


@dataclass
class Prepared:
    frames: np.ndarray  # normalized float32 [N, H, W]
    norm: Normalizer
    val_start: int
    test_start: int

    @property
    def n(self) -> int:
        return self.frames.shape[0]


def prepare(cfg: RunConfig, series: GridSeries, norm: Normalizer | None = None) -> Prepared:
    N, H, W = series.shape
    mc = cfg.model
    if H % mc.patch_h or W % mc.patch_w:
        raise DataError(f"frame {H}x{W} cannot be tiled by {mc.patch_h}x{mc.patch_w} patches")
    vs, ts = split_bounds(N, cfg.data.train_frac, cfg.data.val_frac)
    if vs <= mc.seq_len:
        raise DataError(f"training split of {vs} frames is too short for windows of {mc.seq_len}")
    norm = norm or Normalizer.fit(series.frames[:vs])
    return Prepared(norm.apply(series.frames).astype(np.float32), norm, vs, ts)


def windows_for(cfg: RunConfig, prep: Prepared, start: int, stop: int, inputs: np.ndarray | None = None) -> WindowArrays:
    mc = cfg.model
    x = prep.frames if inputs is None else inputs
    return window_arrays(x, mc.seq_len, mc.patch_h, mc.patch_w, start, stop, prep.frames)


def split_range(prep: Prepared, split: str) -> tuple[int, int]:
    return (prep.val_start, prep.test_start) if split == "val" else (prep.test_start, prep.n)


def checkpoint_meta(cfg: RunConfig, norm: Normalizer) -> dict[str, str]:
    meta = cfg.model.to_meta()
    meta.update(
        {
            "norm.mean": repr(float(norm.mean)),
            "norm.std": repr(float(norm.std)),
            "data.train_frac": repr(cfg.data.train_frac),
            "data.val_frac": repr(cfg.data.val_frac),
            "run.run_id": cfg.run.run_id,
        }
    )
    return meta


def load_model(path: str, cfg: RunConfig, explicit_config: bool) -> tuple[NestS6, Normalizer]:
    """Rebuild a model from a checkpoint, rejecting a clashing [model] config."""
    try:
        tensors, meta = checkpoint.load(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except checkpoint.CheckpointError as exc:
        raise DataError(f"{path}: {exc}") from None
    try:
        ck_cfg = ModelConfig.from_meta(meta)
        norm = Normalizer(float(meta["norm.mean"]), float(meta["norm.std"]))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: incomplete checkpoint metadata ({exc})") from None
    if explicit_config and ck_cfg != cfg.model:
        raise ConfigError(
            "checkpoint model config does not match the run config\n"
            f"  checkpoint: {ck_cfg}\n  config:     {cfg.model}"
        )
    cfg.model = ck_cfg
    try:
        model = NestS6(ck_cfg, params=tensors)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return model, norm


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be positive")
    return h, w


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------
def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    try:
        series = synth_generate(cfg.synth)
    except ValueError as exc:
        raise ConfigError(f"[synth]: {exc}") from None
    path = Path(args.output) if args.output else out_dir(cfg) / "series.grid"
    try:
        save_series(series, path)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc.strerror}") from None
    f = series.frames
    print(f"wrote {path}  N={f.shape[0]} H={f.shape[1]} W={f.shape[2]}")
    print(f"mean={f.mean():.4f} std={f.std():.4f} min={f.min():.4f} max={f.max():.4f}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    from .plotting import plot_training_curve

    series = load_frames(cfg, args.data)
    prep = prepare(cfg, series)
    train = windows_for(cfg, prep, 0, prep.val_start)
    val = windows_for(cfg, prep, prep.val_start, prep.test_start) if prep.test_start > prep.val_start else None
    out = out_dir(cfg)
    model = NestS6(cfg.model, seed=cfg.init_seed)
    res = fit(model, train, val, prep.norm, cfg.train, log_path=out / "train_log.csv")
    checkpoint.save(out / "model.ckpt", model.state_dict(), checkpoint_meta(cfg, prep.norm))
    plot_training_curve(res.history, out / "training_curve.png")
    if res.history and not math.isfinite(res.history[-1]["train_loss"]):
        print("training produced a non-finite loss", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote {out / 'model.ckpt'} (best epoch {res.best_epoch})")
    if val is not None:
        mine = evaluate_one_step(model, val, prep.norm, memory_enabled=model.slow is not None).report
        base = evaluate_one_step(PersistenceModel(), val, prep.norm, memory_enabled=False).report
        print(f"val MAE {mine.mae:.4f} (persistence {base.mae:.4f})")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    from .plotting import plot_heatmap, plot_rollout

    model, norm = load_model(args.checkpoint, cfg, args.config is not None)
    prep = prepare(cfg, load_frames(cfg, args.data), norm)
    split = args.split or cfg.eval.split
    start, stop = split_range(prep, split)
    horizon = args.horizon or 1
    spec = DriftSpec(DriftKind(args.drift), seed=cfg.noise_seed)
    memory_on = not args.no_memory
    inputs = drift_apply(prep.frames, spec)
    targets = prep.frames
    if cfg.eval.shifted_targets and spec.kind is DriftKind.SPATIAL_SHIFT:
        targets = inputs
    out = out_dir(cfg)
    rid = cfg.run.run_id
    mc = cfg.model
    if horizon == 1:
        windows = window_arrays(inputs, mc.seq_len, mc.patch_h, mc.patch_w, start, stop, targets)
        one = evaluate_one_step(model, windows, norm, memory_on, spec)
        reports, preds = [one.report], one.preds
    else:
        trace = rollout_eval(
            model, inputs, targets, start, stop, norm, mc.seq_len, (mc.patch_h, mc.patch_w), horizon, memory_on, spec
        )
        reports, preds = trace.reports, trace.preds[0]
        windows = window_arrays(inputs, mc.seq_len, mc.patch_h, mc.patch_w, start, stop, targets)
        plot_rollout([r.horizon for r in reports], [r.mae for r in reports], [r.rmse for r in reports],
                     out / "rollout.png")
    if any(not (math.isfinite(r.mae) and math.isfinite(r.rmse)) for r in reports):
        print("evaluation produced non-finite metrics", file=sys.stderr)
        return EXIT_NUMERIC
    write_report(out / "eval_report.csv", [report_row(rid, split, r) for r in reports])
    for r in reports:
        print(f"h={r.horizon} drift={r.drift_kind} memory={'on' if r.memory_enabled else 'off'} "
              f"MAE={r.mae:.4f} RMSE={r.rmse:.4f} n={r.n_samples}")
    if horizon > 1:
        print(f"accumulation: dMAE={reports[-1].mae - reports[0].mae:+.4f} "
              f"dRMSE={reports[-1].rmse - reports[0].rmse:+.4f}")
    if args.per_pixel_map:
        H, W = prep.frames.shape[1:]
        grid_p, grid_t = unpatchify(preds, H, W), unpatchify(windows.y, H, W)
        rmse_map = per_pixel_rmse_map(grid_p, grid_t, norm)
        vmax = write_pgm(rmse_map, out / "rmse_map.pgm")
        plot_heatmap(rmse_map, out / "rmse_map.png")
        print(f"wrote {out / 'rmse_map.pgm'} (max {vmax:.4f})")
    return EXIT_OK


def cmd_drift(args: argparse.Namespace, cfg: RunConfig) -> int:
    from .plotting import plot_drift

    model, norm = load_model(args.checkpoint, cfg, args.config is not None)
    prep = prepare(cfg, load_frames(cfg, args.data), norm)
    split = args.split or cfg.eval.split
    start, stop = split_range(prep, split)
    mc = cfg.model
    rows, on, off = [], [], []
    for kind in DriftKind:
        spec = DriftSpec(kind, seed=cfg.noise_seed)
        for memory in (True, False):
            rep = drift_eval(model, prep.frames, spec, memory, start, stop, norm, mc.seq_len,
                             (mc.patch_h, mc.patch_w), cfg.eval.shifted_targets)
            rows.append(report_row(cfg.run.run_id, split, rep))
            (on if memory else off).append(rep.mae)
        gain = 1 - on[-1] / off[-1] if off[-1] > 0 else float("nan")
        print(f"{kind.value:<14} memory on {on[-1]:.4f}  off {off[-1]:.4f}  reduction {gain:6.1%}")
    out = out_dir(cfg)
    write_report(out / "drift_report.csv", rows)
    plot_drift([k.value for k in DriftKind], on, off, out / "drift.png")
    if not all(math.isfinite(v) for v in on + off):
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_macs(args: argparse.Namespace, cfg: RunConfig) -> int:
    if args.checkpoint:
        model, _ = load_model(args.checkpoint, cfg, args.config is not None)
        mcfg = model.cfg
    else:
        mcfg = cfg.model
    h, w = args.grid or (cfg.synth.H, cfg.synth.W)
    try:
        mc = count_macs(mcfg, h, w)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(write_mac_ledger(mc, out_dir(cfg) / "macs.csv"))
    return EXIT_OK


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-c", "--config", help="run config file (key = value with sections)")
    common.add_argument("--workers", type=int, help="cap on BLAS threads; 1 guarantees reproducibility")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="nests6", description="Selective-scan traffic forecaster with a nested slow memory.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic grid series")
    s.add_argument("-o", "--output", help="output path (default <out>/series.grid)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train and write model.ckpt + train_log.csv")
    s.add_argument("--data", help="grid series file (default: synthesize from [synth])")
    s.set_defaults(func=cmd_train)

    def eval_flags(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data")
        sp.add_argument("--split", choices=["val", "test"])

    s = sub.add_parser("eval", parents=[common], help="one-step or rollout metrics")
    eval_flags(s)
    s.add_argument("--horizon", type=int, default=None, help="rollout horizon (default 1)")
    s.add_argument("--drift", choices=[k.value for k in DriftKind], default="none")
    s.add_argument("--no-memory", action="store_true", help="disable memory injection and writes")
    s.add_argument("--per-pixel-map", action="store_true", help="write an RMSE heatmap (PGM + PNG)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("rollout", parents=[common], help="eval with --horizon from [eval] horizon")
    eval_flags(s)
    s.add_argument("--horizon", type=int, default=None)
    s.add_argument("--drift", choices=[k.value for k in DriftKind], default="none")
    s.add_argument("--no-memory", action="store_true")
    s.add_argument("--per-pixel-map", action="store_true")
    s.set_defaults(func=cmd_eval, rollout=True)

    s = sub.add_parser("drift", parents=[common], help="all drift kinds with memory on and off")
    eval_flags(s)
    s.set_defaults(func=cmd_drift)

    s = sub.add_parser("macs", parents=[common], help="analytic MAC ledger")
    s.add_argument("--checkpoint")
    s.add_argument("--grid", type=_parse_grid, help="full grid size HxW")
    s.set_defaults(func=cmd_macs)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if getattr(args, "rollout", False) and args.horizon is None:
            args.horizon = cfg.eval.horizon
        if getattr(args, "horizon", None) is not None and args.horizon < 1:
            raise ConfigError("--horizon must be >= 1")
        workers = args.workers if args.workers is not None else cfg.run.workers
        if workers < 1:
            raise ConfigError("--workers must be >= 1")
        with threadpool_limits(limits=workers):
            return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
