"""Flat ``key = value`` configuration files.

Keys are dotted (``replay.strategy``), ``#`` starts a comment, and unknown
keys are rejected. Values resolve as: command-line override, then file, then
the built-in default.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from .env import REWARD_MODES
from .eventlog import EventLogError, SynthSpec
from .replay import DISTORTION_MODES
from .trainer import STRATEGIES, TrainingConfig, TrainingError


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(options):
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"{t!r} is not one of {', '.join(options)}")
        return t
    return parse


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _steps(text: str) -> tuple[str, ...]:
    steps = tuple(s.strip() for s in text.split(",") if s.strip())
    if not steps:
        raise ValueError("empty activity sequence")
    return steps


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {v}")
    return v


def _delimiter(text: str) -> str:
    text = {"tab": "\t", "\\t": "\t"}.get(text, text)
    if len(text) != 1:
        raise ValueError(f"delimiter must be one character, got {text!r}")
    return text


def _channels(text: str) -> tuple[int, ...]:
    v = _ints(text)
    if len(v) != 3:
        raise ValueError("net.channels needs exactly three comma-separated widths")
    return v


# key -> (section, field name, parser)
SCHEMA: dict[str, tuple[str, str, Callable[[str], Any]]] = {
    "seed": ("train", "seed", _u64),
    "train.epochs": ("train", "epochs", int),
    "train.trials": ("train", "trials", int),
    "train.gamma": ("train", "gamma", float),
    "train.epsilon_start": ("train", "epsilon_start", float),
    "train.epsilon_end": ("train", "epsilon_end", float),
    "train.epsilon_decay_fraction": ("train", "epsilon_decay_fraction", float),
    "train.batch_size": ("train", "batch_size", int),
    "train.learning_rate": ("train", "learning_rate", float),
    "train.beta1": ("train", "beta1", float),
    "train.beta2": ("train", "beta2", float),
    "train.adam_eps": ("train", "adam_eps", float),
    "train.sync_every": ("train", "sync_every", int),
    "train.terminal": ("train", "terminal", _bool),
    "train.pi_tradeoff": ("train", "pi_tradeoff", float),
    "train.best_k": ("train", "best_k", int),
    "env.min_fitness": ("train", "min_fitness", float),
    "env.reward_mode": ("train", "reward_mode", _choice(REWARD_MODES)),
    "env.param_grid_start": ("train", "grid_start", float),
    "env.param_grid_stop": ("train", "grid_stop", float),
    "env.param_grid_step": ("train", "grid_step", float),
    "env.max_alphabet": ("train", "state_side", int),
    "env.permutations": ("train", "permutations", _bool),
    "replay.strategy": ("train", "strategy", _choice(STRATEGIES)),
    "replay.buffer_capacity": ("train", "buffer_capacity", int),
    "replay.balance": ("train", "balance", float),
    "replay.distortion_lambda": ("train", "distortion_lambda", float),
    "replay.distortion_mode": ("train", "distortion_mode", _choice(DISTORTION_MODES)),
    "replay.per_alpha": ("train", "per_alpha", float),
    "replay.per_beta_start": ("train", "per_beta_start", float),
    "replay.per_beta_end": ("train", "per_beta_end", float),
    "replay.per_epsilon": ("train", "per_epsilon", float),
    "net.profile": ("train", "network", _choice(("full", "reduced"))),
    "net.channels": ("train", "net_channels", _channels),
    "net.hidden": ("train", "net_hidden", int),
    "net.dtype": ("train", "dtype", _choice(("float64", "float32"))),
    "data.table": ("data", "table", str),
    "data.delimiter": ("data", "delimiter", _delimiter),
    "data.has_header": ("data", "has_header", _bool),
    "synth.n_cases": ("synth", "n_cases", int),
    "synth.sequence": ("synth", "sequence", _steps),
    "synth.n_noise_columns": ("synth", "n_noise_columns", int),
    "synth.noise_rate": ("synth", "noise_rate", float),
    "synth.n_resources": ("synth", "n_resources", int),
    "synth.noise_cardinality": ("synth", "noise_cardinality", int),
    "synth.overlap": ("synth", "overlap", float),
    "synth.seed": ("data", "synth_seed", _u64),
}

SYNTH_DEFAULTS = dict(n_cases=100, sequence=("A", "B", "C", "D", "E"))


@dataclass(frozen=True)
class DataConfig:
    table: Optional[str] = None
    delimiter: str = ","
    has_header: bool = True
    synth_seed: Optional[int] = None     # falls back to the run seed


@dataclass
class CliConfig:
    """Raw values per section, already parsed and key-checked."""
    values: dict[str, dict[str, Any]] = field(
        default_factory=lambda: {"train": {}, "data": {}, "synth": {}})
    origin: dict[str, str] = field(default_factory=dict)   # key -> "file" | "override"

    def set(self, key: str, raw: str, origin: str) -> None:
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        section, name, parse = SCHEMA[key]
        try:
            value = parse(raw.strip())
        except ValueError as exc:
            raise ConfigError(f"invalid value for {key}: {exc}") from None
        self.values[section][name] = value
        self.origin[key] = origin

    def training(self) -> TrainingConfig:
        try:
            return TrainingConfig(**self.values["train"])
        except TrainingError as exc:
            raise ConfigError(f"invalid training config: {exc}") from None

    def data(self) -> DataConfig:
        return DataConfig(**self.values["data"])

    def synth(self) -> SynthSpec:
        kwargs = {**SYNTH_DEFAULTS, **self.values["synth"]}
        spec = SynthSpec(**kwargs)
        try:
            spec.validate()
        except EventLogError as exc:
            raise ConfigError(f"invalid synth spec: {exc}") from None
        return spec

    def synth_seed(self) -> int:
        seed = self.values["data"].get("synth_seed")
        return self.values["train"].get("seed", 0) if seed is None else seed


def parse_lines(text: str, source: str = "<config>"):
    """Yield ``(lineno, key, value)`` from flat config text."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        yield lineno, key.strip(), value.strip()


def load_config(path=None, overrides=()) -> CliConfig:
    """Merge a config file with ``key=value`` overrides (overrides win)."""
    cfg = CliConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        for lineno, key, value in parse_lines(text, str(p)):
            try:
                cfg.set(key, value, "file")
            except ConfigError as exc:
                raise ConfigError(f"{p}:{lineno}: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        cfg.set(key, value, "override")
    return cfg


def dump_defaults() -> str:
    """Every key with its built-in default, in config-file syntax."""
    defaults = {"train": {f.name: f.default for f in dataclasses.fields(TrainingConfig)},
                "data": {f.name: f.default for f in dataclasses.fields(DataConfig)},
                "synth": {**{f.name: f.default for f in dataclasses.fields(SynthSpec) if f.init},
                          **SYNTH_DEFAULTS}}
    lines = []
    for key, (section, name, _) in SCHEMA.items():
        value = defaults[section].get(name)
        if isinstance(value, tuple):
            value = ",".join(map(str, value))
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {'' if value is None else value}")
    return "\n".join(lines) + "\n"
