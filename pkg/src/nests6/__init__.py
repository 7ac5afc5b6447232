"""Patch-wise traffic forecasting with a selective state-space core and a slow spatial memory."""

from .data import DriftKind, DriftSpec, GridSeries, Normalizer, SynthConfig, synth_generate
from .evaluation import MetricReport, count_macs, drift_eval, evaluate_one_step, rollout_eval
from .model import ModelConfig, NestS6
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "DriftKind",
    "DriftSpec",
    "GridSeries",
    "MetricReport",
    "ModelConfig",
    "NestS6",
    "Normalizer",
    "SynthConfig",
    "TrainConfig",
    "count_macs",
    "drift_eval",
    "evaluate_one_step",
    "fit",
    "rollout_eval",
    "synth_generate",
]
