"""Declarative run configuration.

A run file is flat ``key = value`` text split into sections::

    [run]
    seed = 0
    out_dir = runs
    [model]
    channels = 16

Every key has a default, so an empty file is a valid config. Unknown
sections and keys are rejected. Component seeds are not configured one by
one: they are split off the root ``[run] seed`` by name (see
:func:`stream_seed`) so that adding a new random consumer never shifts the
draws of an existing one.
"""

from __future__ import annotations

import configparser
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .data import SynthConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration entries."""


def stream_seed(root: int, name: str) -> int:
    """Independent 32-bit seed for the named consumer of ``root``."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs"
    run_id: str = "run"
    workers: int = 1


@dataclass
class DataSection:
    path: str = ""  # empty: synthesize from [synth]
    train_frac: float = 0.7
    val_frac: float = 0.1


@dataclass
class EvalSection:
    horizon: int = 6
    split: str = "test"
    shifted_targets: bool = False


# Seeds are derived from [run] seed, so the per-component seed fields are
# not exposed as keys.
_HIDDEN = {"seed"}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self) -> None:
        self.synth.seed = stream_seed(self.run.seed, "data")
        self.train.seed = stream_seed(self.run.seed, "train")
        if self.run.workers < 1:
            raise ConfigError("run.workers must be >= 1")
        if self.eval.split not in ("val", "test"):
            raise ConfigError(f"eval.split must be 'val' or 'test', got {self.eval.split!r}")
        if not (0 < self.data.train_frac and 0 <= self.data.val_frac and self.data.train_frac + self.data.val_frac < 1):
            raise ConfigError("data fractions must satisfy 0 < train, 0 <= val, train + val < 1")

    @property
    def init_seed(self) -> int:
        return stream_seed(self.run.seed, "init")

    @property
    def noise_seed(self) -> int:
        return stream_seed(self.run.seed, "noise")

    def to_text(self) -> str:
        out = []
        for sec in fields(self):
            obj = getattr(self, sec.name)
            out.append(f"[{sec.name}]")
            out += [f"{f.name} = {getattr(obj, f.name)}" for f in fields(obj) if f.name not in _HIDDEN or sec.name == "run"]
            out.append("")
        return "\n".join(out)


def _coerce(raw: str, typ: Any, where: str) -> Any:
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if name == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if name == "int":
            return int(raw)
        if name == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {name}") from None


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if cp.defaults():
        raise ConfigError(f"{source}: keys outside a section: {sorted(cp.defaults())}")
    kinds = {f.name: f.default_factory for f in fields(RunConfig)}
    built: dict[str, Any] = {}
    for sec in cp.sections():
        if sec not in kinds:
            raise ConfigError(f"{source}: unknown section [{sec}]; expected one of {sorted(kinds)}")
        factory = kinds[sec]
        known = {f.name: f.type for f in fields(factory()) if f.name not in _HIDDEN or sec == "run"}
        kw = {}
        for key, raw in cp.items(sec):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]; expected one of {sorted(known)}")
            kw[key] = _coerce(raw, known[key], f"{source} [{sec}] {key}")
        try:
            built[sec] = type(factory())(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source} [{sec}]: {exc}") from None
    try:
        return RunConfig(**built)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))
